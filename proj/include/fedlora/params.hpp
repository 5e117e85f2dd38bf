#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fedlora/matrix.hpp"

namespace fedlora {

/// An ordered list of parameter matrices, e.g. {B, A} for a common adapter.
using ParamBlocks = std::vector<Matrix>;

ParamBlocks zeros_like(const ParamBlocks& p);
void axpy(ParamBlocks& y, double s, const ParamBlocks& x);
ParamBlocks scaled(ParamBlocks p, double s);
ParamBlocks subtract(ParamBlocks a, const ParamBlocks& b);
double dot(const ParamBlocks& a, const ParamBlocks& b);
double norm(const ParamBlocks& p);
bool all_finite(const ParamBlocks& p);
void require_same_shape(const ParamBlocks& a, const ParamBlocks& b, const char* what);

/// Rows of a dataset used for one stochastic evaluation; empty means the full set.
struct Batch {
  std::span<const std::size_t> rows;
  bool full() const { return rows.empty(); }
};

}  // namespace fedlora
