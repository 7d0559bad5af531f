#include "mmc/config.hpp"

#include <cctype>
#include <sstream>

#include "mmc/errors.hpp"
#include "mmc/io.hpp"

namespace mmc {

namespace {

enum class Kind { text, integer, number, boolean, number_list, integer_list };

struct KeySpec {
  const char* key;
  const char* def;
  Kind kind;
};

// The whole configuration surface. Empty text values mean "unset".
const KeySpec kKeys[] = {
    {"dataset", "", Kind::text},
    {"out", "out", Kind::text},
    {"seed", "1", Kind::integer},
    {"checkpoint", "", Kind::text},

    {"model.channels", "16,32,64,64", Kind::integer_list},
    {"model.strides", "2,2,2,1", Kind::integer_list},
    {"model.kernel", "3", Kind::integer},
    {"model.stride_mod", "0", Kind::boolean},

    {"train.epochs", "10", Kind::integer},
    {"train.batches_per_epoch", "0", Kind::integer},
    {"train.lr1", "0.05", Kind::number},
    {"train.lr2", "-1", Kind::number},
    {"train.momentum", "0.9", Kind::number},
    {"train.n", "2", Kind::integer},
    {"train.s", "5", Kind::integer},
    {"train.lambda1", "0", Kind::number},
    {"train.lambda2", "0", Kind::number},
    {"train.stage2", "1", Kind::boolean},
    {"train.mask_variant", "input", Kind::text},
    {"train.intensity", "", Kind::text},

    {"cam.resize_first", "0", Kind::boolean},
    {"cam.detach_norm", "0", Kind::boolean},

    {"eval.split", "test", Kind::text},
    {"eval.grid", "100", Kind::integer},
    {"eval.deltas", "0.3,0.5,0.7", Kind::number_list},
    {"eval.connectivity", "8", Kind::integer},
    {"eval.largest_only", "0", Kind::boolean},
    {"eval.pxap_per_image", "0", Kind::boolean},
    {"eval.quantize", "1", Kind::boolean},
    {"eval.dump_maps", "0", Kind::boolean},
    {"eval.maps_dir", "", Kind::text},
    {"eval.classifier", "", Kind::text},
    {"eval.topk", "0", Kind::integer},
    {"eval.use_predicted_class", "0", Kind::boolean},

    {"gen.classes", "8", Kind::integer},
    {"gen.size", "64", Kind::integer},
    {"gen.train", "25", Kind::integer},
    {"gen.val", "0", Kind::integer},
    {"gen.test", "13", Kind::integer},
    {"gen.bg", "varied", Kind::text},
    {"gen.marker", "1", Kind::boolean},
    {"gen.scale", "0.35,0.6", Kind::number_list},

    {"dump.split", "test", Kind::text},
    {"dump.limit", "0", Kind::integer},

    {"ablate.study", "", Kind::text},
    {"ablate.seeds", "1,2,3", Kind::integer_list},
    {"ablate.values", "", Kind::text},
    {"ablate.batch", "10", Kind::integer},
    {"ablate.jobs", "1", Kind::integer},

    {"analyze.kind", "dispersion", Kind::text},
    {"analyze.split", "test", Kind::text},
};

const KeySpec* find_key(const std::string& key) {
  for (const auto& ks : kKeys)
    if (key == ks.key) return &ks;
  return nullptr;
}

long long parse_integer(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    long long out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " wants an integer, got '" + v + "'");
  }
}

double parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " wants a number, got '" + v + "'");
  }
}

bool parse_boolean(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config key " + key + " wants a boolean, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      parts.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

void validate_value(const KeySpec& ks, const std::string& v) {
  if (v.empty()) return;  // unset
  switch (ks.kind) {
    case Kind::text:
      return;
    case Kind::integer:
      parse_integer(ks.key, v);
      return;
    case Kind::number:
      parse_number(ks.key, v);
      return;
    case Kind::boolean:
      parse_boolean(ks.key, v);
      return;
    case Kind::number_list:
      for (const auto& p : split_commas(v)) parse_number(ks.key, p);
      return;
    case Kind::integer_list:
      for (const auto& p : split_commas(v)) parse_integer(ks.key, p);
      return;
  }
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& ks : kKeys) {
    values_[ks.key] = ks.def;
    sources_[ks.key] = Source::fallback;
  }
}

const std::map<std::string, std::string>& RunConfig::defaults() {
  static const std::map<std::string, std::string> defs = [] {
    std::map<std::string, std::string> m;
    for (const auto& ks : kKeys) m[ks.key] = ks.def;
    return m;
  }();
  return defs;
}

bool RunConfig::known(const std::string& key) const { return find_key(key) != nullptr; }

void RunConfig::set(const std::string& key, const std::string& value, Source src) {
  const KeySpec* ks = find_key(key);
  if (!ks) throw ConfigError("unknown config key: " + key);
  validate_value(*ks, value);
  values_[key] = value;
  sources_[key] = src;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::istringstream is(io::read_text_file(path));
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t");
    line = line.substr(first, last - first + 1);
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + " line " + std::to_string(line_no) +
                        ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string s) {
      auto a = s.find_first_not_of(" \t");
      if (a == std::string::npos) return std::string();
      auto b = s.find_last_not_of(" \t");
      return s.substr(a, b - a + 1);
    };
    try {
      set(trim(key), trim(value), Source::file);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

RunConfig::Source RunConfig::source(const std::string& key) const {
  auto it = sources_.find(key);
  if (it == sources_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

std::string RunConfig::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

long long RunConfig::integer(const std::string& key) const {
  return parse_integer(key, str(key));
}

double RunConfig::number(const std::string& key) const { return parse_number(key, str(key)); }

bool RunConfig::flag(const std::string& key) const { return parse_boolean(key, str(key)); }

std::vector<double> RunConfig::numbers(const std::string& key) const {
  std::vector<double> out;
  for (const auto& p : split_commas(str(key))) out.push_back(parse_number(key, p));
  return out;
}

std::vector<long long> RunConfig::integers(const std::string& key) const {
  std::vector<long long> out;
  for (const auto& p : split_commas(str(key))) out.push_back(parse_integer(key, p));
  return out;
}

std::string RunConfig::resolved_text() const {
  std::ostringstream os;
  for (const auto& [key, value] : values_) {
    const char* src = "default";
    switch (sources_.at(key)) {
      case Source::fallback: src = "default"; break;
      case Source::file: src = "file"; break;
      case Source::flag: src = "flag"; break;
    }
    os << key << "=" << value << "  # " << src << "\n";
  }
  return os.str();
}

std::uint64_t RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  for (const auto& [key, value] : values_) {
    mix(key);
    mix("=");
    mix(value);
    mix("\n");
  }
  return h;
}

}  // namespace mmc
