#include "scrl/config_io.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <sstream>

#include "scrl/error.hpp"

namespace scrl {

namespace pt = boost::property_tree;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_list(std::string_view text) {
  std::vector<std::string_view> out;
  text = trim(text);
  if (text.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(',', start);
    out.push_back(trim(text.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
void parse_integral(std::string_view text, T& out) {
  text = trim(text);
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument("expected an integer");
  out = v;
}

}  // namespace

const std::string* IniSection::find(std::string_view key) const {
  for (const auto& [k, v] : entries) {
    if (k == key) return &v;
  }
  return nullptr;
}

void IniSection::set(std::string key, std::string value) {
  for (auto& [k, v] : entries) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries.emplace_back(std::move(key), std::move(value));
}

IniDocument IniDocument::parse(const std::string& text, const std::string& source) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error("config", source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  IniDocument doc;
  for (const auto& [name, child] : tree) {
    if (child.empty()) {
      throw Error("config", source + ": key '" + name + "' appears outside any [section]");
    }
    IniSection s{name, {}};
    for (const auto& [key, value] : child) s.entries.emplace_back(key, value.data());
    doc.sections.push_back(std::move(s));
  }
  return doc;
}

IniDocument IniDocument::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("config", "cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path);
}

std::string IniDocument::str() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& s : sections) {
    if (!first) os << '\n';
    first = false;
    os << '[' << s.name << "]\n";
    for (const auto& [k, v] : s.entries) os << k << " = " << v << '\n';
  }
  return os.str();
}

const IniSection* IniDocument::find(std::string_view name) const {
  for (const auto& s : sections) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

IniSection& IniDocument::section(std::string_view name) {
  for (auto& s : sections) {
    if (s.name == name) return s;
  }
  sections.push_back(IniSection{std::string(name), {}});
  return sections.back();
}

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(std::int64_t v) { return std::to_string(v); }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(const std::array<int, 4>& v) {
  return format_value(std::vector<int>(v.begin(), v.end()));
}
std::string format_value(const std::array<double, 3>& v) {
  return format_value(v[0]) + ", " + format_value(v[1]) + ", " + format_value(v[2]);
}
std::string format_value(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(v[i]);
  }
  return out;
}
std::string format_value(BlockKind v) { return v == BlockKind::Basic ? "basic" : "bottleneck"; }
std::string format_value(Setting v) { return std::string(to_string(v)); }
std::string format_value(ShapeEncoding v) {
  return v == ShapeEncoding::MultiPart ? "multi-part" : "silhouette";
}

void parse_value(std::string_view text, int& out) { parse_integral(text, out); }
void parse_value(std::string_view text, std::int64_t& out) { parse_integral(text, out); }
void parse_value(std::string_view text, std::uint64_t& out) { parse_integral(text, out); }
void parse_value(std::string_view text, double& out) {
  text = trim(text);
  double v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument("expected a number");
  out = v;
}
void parse_value(std::string_view text, bool& out) {
  text = trim(text);
  if (text == "true" || text == "1" || text == "on" || text == "yes") {
    out = true;
  } else if (text == "false" || text == "0" || text == "off" || text == "no") {
    out = false;
  } else {
    throw std::invalid_argument("expected true/false");
  }
}
void parse_value(std::string_view text, std::string& out) { out = std::string(trim(text)); }
void parse_value(std::string_view text, std::array<int, 4>& out) {
  std::vector<int> v;
  parse_value(text, v);
  if (v.size() != 4) throw std::invalid_argument("expected 4 comma-separated integers");
  std::copy(v.begin(), v.end(), out.begin());
}
void parse_value(std::string_view text, std::array<double, 3>& out) {
  const auto parts = split_list(text);
  if (parts.size() != 3) throw std::invalid_argument("expected 3 comma-separated numbers");
  for (int i = 0; i < 3; ++i) parse_value(parts[i], out[i]);
}
void parse_value(std::string_view text, std::vector<int>& out) {
  std::vector<int> v;
  for (auto part : split_list(text)) {
    int x = 0;
    parse_value(part, x);
    v.push_back(x);
  }
  out = std::move(v);
}
void parse_value(std::string_view text, BlockKind& out) {
  text = trim(text);
  if (text == "basic") {
    out = BlockKind::Basic;
  } else if (text == "bottleneck") {
    out = BlockKind::Bottleneck;
  } else {
    throw std::invalid_argument("expected basic or bottleneck");
  }
}
void parse_value(std::string_view text, Setting& out) {
  auto s = parse_setting(trim(text));
  if (!s) throw std::invalid_argument("expected one of B, B+S, B+S+I, full, full-S1");
  out = *s;
}
void parse_value(std::string_view text, ShapeEncoding& out) {
  text = trim(text);
  if (text == "multi-part") {
    out = ShapeEncoding::MultiPart;
  } else if (text == "silhouette") {
    out = ShapeEncoding::Silhouette;
  } else {
    throw std::invalid_argument("expected multi-part or silhouette");
  }
}

void throw_unknown_key(const std::string& section, const std::string& key) {
  throw Error("config", "unknown key '" + key + "' in section [" + section + "]");
}

void throw_bad_value(const std::string& section, const std::string& key, const std::string& value,
                     const std::string& why) {
  throw Error("config", "bad value '" + value + "' for [" + section + "] " + key + ": " + why);
}

}  // namespace scrl
