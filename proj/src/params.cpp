#include "fedlora/params.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fedlora {

ParamBlocks zeros_like(const ParamBlocks& p) {
  ParamBlocks out;
  out.reserve(p.size());
  for (const Matrix& m : p) out.emplace_back(m.rows(), m.cols());
  return out;
}

void require_same_shape(const ParamBlocks& a, const ParamBlocks& b, const char* what) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(what) + ": block count mismatch");
  }
  for (std::size_t i = 0; i < a.size(); ++i) fedlora::require_same_shape(a[i], b[i], what);
}

void axpy(ParamBlocks& y, double s, const ParamBlocks& x) {
  require_same_shape(y, x, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y[i].axpy(s, x[i]);
}

ParamBlocks scaled(ParamBlocks p, double s) {
  for (Matrix& m : p) m *= s;
  return p;
}

ParamBlocks subtract(ParamBlocks a, const ParamBlocks& b) {
  axpy(a, -1.0, b);
  return a;
}

double dot(const ParamBlocks& a, const ParamBlocks& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += dot(a[i], b[i]);
  return s;
}

double norm(const ParamBlocks& p) {
  double s = 0.0;
  for (const Matrix& m : p) s += m.squared_norm();
  return std::sqrt(s);
}

bool all_finite(const ParamBlocks& p) {
  for (const Matrix& m : p)
    if (!m.all_finite()) return false;
  return true;
}

}  // namespace fedlora
