#include "stainforge/rng.hpp"

#include <bit>
#include <sstream>
#include <stdexcept>

namespace stainforge {

std::string Rng::serialize() const {
  std::ostringstream os;
  os << std::hex;
  for (auto v : state_) os << v << ' ';
  os << (has_spare_ ? 1 : 0) << ' ' << std::bit_cast<std::uint64_t>(spare_);
  return os.str();
}

Rng Rng::deserialize(const std::string& text) {
  std::istringstream is(text);
  is >> std::hex;
  Rng r;
  int spare_flag = 0;
  std::uint64_t spare_bits = 0;
  for (auto& v : r.state_) is >> v;
  is >> spare_flag >> spare_bits;
  if (!is) throw std::invalid_argument("malformed RNG state");
  r.has_spare_ = spare_flag != 0;
  r.spare_ = std::bit_cast<double>(spare_bits);
  return r;
}

}  // namespace stainforge
