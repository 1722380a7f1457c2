#pragma once

// Minimal CSV emission with locale-independent, round-trip number formatting.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pnpslab {

/// Shortest decimal form that parses back to the same double.
inline std::string format_number(double value) {
  if (std::isnan(value)) return "NA";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

inline std::string format_number(std::optional<double> value) { return value ? format_number(*value) : "NA"; }

class CsvWriter {
public:
  CsvWriter(std::ostream& out, const std::vector<std::string>& header) : out_(out), width_(header.size()) {
    write(header);
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw std::logic_error("CSV row width does not match the header");
    write(cells);
  }

private:
  void write(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      const std::string& c = cells[i];
      if (c.find_first_of(",\"\n") == std::string::npos) {
        out_ << c;
      } else {
        out_ << '"';
        for (char ch : c) {
          if (ch == '"') out_ << '"';
          out_ << ch;
        }
        out_ << '"';
      }
    }
    out_ << '\n';
  }

  std::ostream& out_;
  std::size_t width_;
};

} // namespace pnpslab
