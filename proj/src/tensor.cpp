#include "tristream/tensor.hpp"

namespace tristream {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d <= 0) throw ShapeError("shape extents must be positive: " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

}  // namespace tristream
