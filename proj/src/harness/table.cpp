#include "pfnf/harness/table.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "pfnf/error.hpp"

namespace pfnf::harness {

namespace {

constexpr char kFtbinMagic[8] = {'P', 'F', 'N', 'F', 'T', 'B', 'L', '1'};

std::string where(const std::string& source, std::size_t line, std::size_t column, const std::string& name) {
  return source + ":" + std::to_string(line) + ": column " + std::to_string(column) + " ('" + name + "')";
}

// Splits one CSV record. Quoted fields may contain commas and doubled
// quotes; records never span lines.
std::vector<std::string> split_record(const std::string& line, const std::string& source, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"' && cur.empty() && !was_quoted) {
      quoted = was_quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError(source + ":" + std::to_string(line_no) + ": unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

std::string quote_field(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

bool is_missing_token(const std::string& s) {
  return s.empty() || s == "nan" || s == "NaN" || s == "NAN" || s == "NA" || s == "na";
}

// Returns NaN for a missing token; throws on anything non-numeric.
double parse_number(const std::string& raw, const std::string& ctx) {
  const auto b = raw.find_first_not_of(" \t");
  const std::string s = b == std::string::npos ? std::string() : raw.substr(b, raw.find_last_not_of(" \t") - b + 1);
  if (is_missing_token(s)) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ParseError(ctx + ": non-numeric value '" + s + "'");
  if (std::isinf(v)) throw ParseError(ctx + ": infinite value '" + s + "'");
  return v;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

enum class Role : std::uint8_t { kId, kY, kSplit, kFold, kGroup, kValue };

Role column_role(const std::string& name, const std::string& source) {
  if (name == "id") return Role::kId;
  if (name == "y") return Role::kY;
  if (name == "split") return Role::kSplit;
  if (name == "fold") return Role::kFold;
  if (name == "group") return Role::kGroup;
  if (name.rfind("f_", 0) == 0 || name.rfind("c_", 0) == 0) return Role::kValue;
  throw ParseError(source + ": unknown column '" + name + "' (expected id, y, split, fold, group, f_*, c_*)");
}

bool same_bits(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b) || (std::isnan(a) && std::isnan(b));
}

template <typename V>
bool same_optional(const std::optional<V>& a, const std::optional<V>& b) {
  return a.has_value() == b.has_value() && (!a || *a == *b);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

double FeatureTable::featurize_seconds() const {
  const auto it = metadata.find("featurize_seconds");
  return it != metadata.end() && it->is_number() ? it->get<double>() : 0.0;
}

void FeatureTable::validate() const {
  const std::size_t n = ids.size();
  if (n == 0) throw ParseError("feature table has no rows");
  if (columns.empty()) throw ParseError("feature table has no f_* or c_* columns");
  if (x.rank() != 2 || x.dim(0) != n || x.dim(1) != columns.size()) {
    throw ParseError("feature matrix shape does not match ids and header");
  }
  if ((y && y->size() != n) || (split && split->size() != n) || (fold && fold->size() != n) ||
      (group && group->size() != n)) {
    throw ParseError("feature table columns differ in length");
  }
  if (split && fold) throw ParseError("feature table has both 'split' and 'fold' columns");
  std::unordered_map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i].empty()) throw ParseError("empty id in row " + std::to_string(i));
    if (!seen.emplace(ids[i], i).second) throw ParseError("duplicate id '" + ids[i] + "'");
  }
  for (double v : x.data()) {
    if (std::isinf(v)) throw ParseError("infinite feature value");
  }
  if (y) {
    for (double v : *y) {
      if (std::isinf(v)) throw ParseError("infinite target value");
    }
  }
  if (fold) {
    for (int f : *fold) {
      if (f < 0) throw ParseError("negative fold index");
    }
  }
}

FeatureTable FeatureTable::take(const std::vector<std::size_t>& rows) const {
  FeatureTable t;
  t.columns = columns;
  t.metadata = metadata;
  t.x = Matrix({rows.size(), columns.size()});
  if (y) t.y.emplace();
  if (split) t.split.emplace();
  if (fold) t.fold.emplace();
  if (group) t.group.emplace();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t i = rows[r];
    t.ids.push_back(ids.at(i));
    for (std::size_t j = 0; j < columns.size(); ++j) t.x.at(r, j) = x.at(i, j);
    if (y) t.y->push_back((*y)[i]);
    if (split) t.split->push_back((*split)[i]);
    if (fold) t.fold->push_back((*fold)[i]);
    if (group) t.group->push_back((*group)[i]);
  }
  return t;
}

bool same_table(const FeatureTable& a, const FeatureTable& b) {
  if (a.ids != b.ids || a.columns != b.columns || a.metadata != b.metadata || a.x.shape() != b.x.shape()) {
    return false;
  }
  if (!same_optional(a.split, b.split) || !same_optional(a.fold, b.fold) || !same_optional(a.group, b.group)) {
    return false;
  }
  for (std::size_t i = 0; i < a.x.size(); ++i) {
    if (!same_bits(a.x.data()[i], b.x.data()[i])) return false;
  }
  if (a.y.has_value() != b.y.has_value()) return false;
  if (a.y) {
    for (std::size_t i = 0; i < a.y->size(); ++i) {
      if (!same_bits((*a.y)[i], (*b.y)[i])) return false;
    }
  }
  return true;
}

FeatureTable read_table_csv(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) return true;
    }
    return false;
  };
  if (!next_line()) throw ParseError(source + ": empty file");
  const std::vector<std::string> header = split_record(line, source, line_no);
  std::vector<Role> roles;
  FeatureTable t;
  int id_col = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    roles.push_back(column_role(header[c], source));
    for (std::size_t p = 0; p < c; ++p) {
      if (header[p] == header[c]) throw ParseError(source + ": duplicate column '" + header[c] + "'");
    }
    switch (roles.back()) {
      case Role::kId: id_col = static_cast<int>(c); break;
      case Role::kY: t.y.emplace(); break;
      case Role::kSplit: t.split.emplace(); break;
      case Role::kFold: t.fold.emplace(); break;
      case Role::kGroup: t.group.emplace(); break;
      case Role::kValue: t.columns.push_back(header[c]); break;
    }
  }
  if (id_col < 0) throw ParseError(source + ": missing required column 'id'");

  std::vector<double> values;
  std::unordered_map<std::string, std::size_t> first_line;
  while (next_line()) {
    const std::vector<std::string> fields = split_record(line, source, line_no);
    if (fields.size() != header.size()) {
      throw ParseError(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                       " fields, found " + std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      const std::string& f = fields[c];
      const std::string ctx = where(source, line_no, c + 1, header[c]);
      switch (roles[c]) {
        case Role::kId: {
          if (f.empty()) throw ParseError(ctx + ": empty id");
          const auto [it, fresh] = first_line.emplace(f, line_no);
          if (!fresh) {
            throw ParseError(ctx + ": duplicate id '" + f + "' (first seen on line " + std::to_string(it->second) +
                             ")");
          }
          t.ids.push_back(f);
          break;
        }
        case Role::kY: t.y->push_back(parse_number(f, ctx)); break;
        case Role::kSplit:
          if (f == "train") {
            t.split->push_back(SplitLabel::kTrain);
          } else if (f == "test") {
            t.split->push_back(SplitLabel::kTest);
          } else {
            throw ParseError(ctx + ": split must be 'train' or 'test', got '" + f + "'");
          }
          break;
        case Role::kFold: {
          int v = -1;
          const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
          if (ec != std::errc() || ptr != f.data() + f.size() || v < 0) {
            throw ParseError(ctx + ": fold must be a non-negative integer, got '" + f + "'");
          }
          t.fold->push_back(v);
          break;
        }
        case Role::kGroup: t.group->push_back(f); break;
        case Role::kValue: values.push_back(parse_number(f, ctx)); break;
      }
    }
  }
  t.x = Matrix({t.ids.size(), t.columns.size()}, values);
  t.validate();
  return t;
}

void write_table_csv(const FeatureTable& t, std::ostream& out) {
  t.validate();
  out << "id";
  if (t.y) out << ",y";
  if (t.split) out << ",split";
  if (t.fold) out << ",fold";
  if (t.group) out << ",group";
  for (const auto& c : t.columns) out << ',' << quote_field(c);
  out << '\n';
  for (std::size_t i = 0; i < t.n_rows(); ++i) {
    out << quote_field(t.ids[i]);
    if (t.y) out << ',' << format_number((*t.y)[i]);
    if (t.split) out << ',' << ((*t.split)[i] == SplitLabel::kTrain ? "train" : "test");
    if (t.fold) out << ',' << (*t.fold)[i];
    if (t.group) out << ',' << quote_field((*t.group)[i]);
    for (std::size_t j = 0; j < t.n_columns(); ++j) out << ',' << format_number(t.x.at(i, j));
    out << '\n';
  }
}

// Layout: 8-byte magic, u64 header length, UTF-8 JSON header, then
// n * d little-endian float32 values, row-major.
void write_table_ftbin(const FeatureTable& t, std::ostream& out) {
  t.validate();
  nlohmann::json h = {{"n_rows", t.n_rows()}, {"columns", t.columns}, {"ids", t.ids}, {"metadata", t.metadata}};
  if (t.y) {
    nlohmann::json ys = nlohmann::json::array();
    for (double v : *t.y) ys.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    h["y"] = ys;
  }
  if (t.split) {
    nlohmann::json s = nlohmann::json::array();
    for (SplitLabel v : *t.split) s.push_back(v == SplitLabel::kTrain ? "train" : "test");
    h["split"] = s;
  }
  if (t.fold) h["fold"] = *t.fold;
  if (t.group) h["group"] = *t.group;
  const std::string header = h.dump();
  out.write(kFtbinMagic, sizeof(kFtbinMagic));
  write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<unsigned char> block(t.x.size() * 4);
  for (std::size_t i = 0; i < t.x.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(t.x.data()[i]));
    for (int b = 0; b < 4; ++b) block[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(block.data()), static_cast<std::streamsize>(block.size()));
}

FeatureTable read_table_ftbin(std::istream& in, const std::string& source) {
  char magic[sizeof(kFtbinMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kFtbinMagic, sizeof(magic)) != 0) throw ParseError(source + ": not an .ftbin file");
  const std::uint64_t header_len = read_u64(in);
  if (!in || header_len > (1ULL << 34)) throw ParseError(source + ": bad header length");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ParseError(source + ": truncated header");
  FeatureTable t;
  try {
    const auto h = nlohmann::json::parse(header);
    const auto n = h.at("n_rows").get<std::size_t>();
    t.columns = h.at("columns").get<std::vector<std::string>>();
    t.ids = h.at("ids").get<std::vector<std::string>>();
    t.metadata = h.value("metadata", nlohmann::json::object());
    if (t.ids.size() != n) throw ParseError(source + ": id count does not match n_rows");
    if (h.contains("y")) {
      t.y.emplace();
      for (const auto& v : h["y"]) t.y->push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
    }
    if (h.contains("split")) {
      t.split.emplace();
      for (const auto& v : h["split"]) {
        const auto s = v.get<std::string>();
        if (s != "train" && s != "test") throw ParseError(source + ": bad split label '" + s + "'");
        t.split->push_back(s == "train" ? SplitLabel::kTrain : SplitLabel::kTest);
      }
    }
    if (h.contains("fold")) t.fold = h["fold"].get<std::vector<int>>();
    if (h.contains("group")) t.group = h["group"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(source + ": bad header: " + e.what());
  }
  const std::size_t count = t.ids.size() * t.columns.size();
  std::vector<unsigned char> block(count * 4);
  in.read(reinterpret_cast<char*>(block.data()), static_cast<std::streamsize>(block.size()));
  if (static_cast<std::size_t>(in.gcount()) != block.size()) throw ParseError(source + ": truncated data block");
  t.x = Matrix({t.ids.size(), t.columns.size()});
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(block[4 * i + b]) << (8 * b);
    t.x.data()[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  t.validate();
  return t;
}

FeatureTable load_feature_table(const std::filesystem::path& path) {
  const bool binary = path.extension() == ".ftbin";
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw IoError("cannot read feature table " + path.string());
  if (binary) return read_table_ftbin(in, path.string());
  FeatureTable t = read_table_csv(in, path.string());
  const std::filesystem::path manifest = path.string() + ".manifest.json";
  if (std::filesystem::exists(manifest)) {
    std::ifstream m(manifest);
    t.metadata = nlohmann::json::parse(m, nullptr, false);
    if (!t.metadata.is_object()) throw ParseError(manifest.string() + ": manifest must be a JSON object");
  }
  return t;
}

void write_table(const FeatureTable& table, const std::filesystem::path& path) {
  const bool binary = path.extension() == ".ftbin";
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw IoError("cannot write " + path.string());
  if (binary) {
    write_table_ftbin(table, out);
  } else {
    write_table_csv(table, out);
    if (!table.metadata.empty()) {
      std::ofstream m(path.string() + ".manifest.json");
      m << table.metadata.dump(1) << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace pfnf::harness
