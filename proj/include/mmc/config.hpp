#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mmc {

// Flat key=value run configuration. Every key is registered with a type and
// a default; unknown keys are rejected at set time, so typos fail loudly.
// Each key remembers where its value came from (default, file, or flag),
// and the resolved set is written next to every run's outputs.
class RunConfig {
 public:
  enum class Source { fallback, file, flag };

  RunConfig();

  void set(const std::string& key, const std::string& value, Source src);
  void load_file(const std::filesystem::path& path);

  bool known(const std::string& key) const;
  Source source(const std::string& key) const;

  std::string str(const std::string& key) const;
  long long integer(const std::string& key) const;
  double number(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> numbers(const std::string& key) const;  // comma separated
  std::vector<long long> integers(const std::string& key) const;

  // Sorted key=value lines with a provenance comment per line.
  std::string resolved_text() const;
  // FNV-1a over the sorted key=value pairs, provenance excluded.
  std::uint64_t hash() const;

  static const std::map<std::string, std::string>& defaults();

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, Source> sources_;
};

}  // namespace mmc
