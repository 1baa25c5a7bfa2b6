#include "cap/numfmt.hpp"

#include <array>
#include <charconv>

namespace cap {

std::string format_double(double value) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  if (ec != std::errc()) return "nan";
  std::string out(buf.data(), ptr);
  if (out == "-0") out = "0";
  return out;
}

}  // namespace cap
