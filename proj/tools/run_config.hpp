#pragma once

// Resolved run configuration: built-in defaults, then an optional JSON config
// file, then command-line flags. The result is written next to every run's
// outputs as config.json.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pointform/pointform.hpp"

namespace pointform::cli {

using nlohmann::json;

inline json model_section(const ModelConfig& c = {}) { return c; }

inline json data_section() {
  return {{"dir", ""},      {"manifest", ""},  {"per_class", 200}, {"points", 1024},
          {"jitter", 0.01}, {"val_ratio", 0.2}, {"seed", 0}};
}

inline json optimizer_section(const LRPolicy& p, std::size_t batch_size) {
  return {{"peak", p.peak}, {"initial", p.initial}, {"weight_decay", p.weight_decay}, {"batch_size", batch_size}};
}

inline json augment_section(const AugmentSpec& a) {
  return {{"scale", a.scale},
          {"scale_low", a.scale_low},
          {"scale_high", a.scale_high},
          {"noise_sigma", a.noise_sigma},
          {"rotate_x", a.rotate_axes[0]},
          {"rotate_y", a.rotate_axes[1]},
          {"rotate_z", a.rotate_axes[2]},
          {"dropout", a.dropout},
          {"resample_to", a.resample_to}};
}

inline AugmentSpec augment_from(const json& j) {
  AugmentSpec a;
  a.scale = j.at("scale").get<bool>();
  a.scale_low = j.at("scale_low").get<double>();
  a.scale_high = j.at("scale_high").get<double>();
  a.noise_sigma = j.at("noise_sigma").get<double>();
  a.rotate_axes = {j.at("rotate_x").get<bool>(), j.at("rotate_y").get<bool>(), j.at("rotate_z").get<bool>()};
  a.dropout = j.at("dropout").get<double>();
  a.resample_to = j.at("resample_to").get<std::size_t>();
  a.validate();
  return a;
}

/// LR policy from the optimizer and schedule sections. A warmup longer than
/// the run is shortened to the run length.
inline LRPolicy policy_from(const json& resolved) {
  LRPolicy p;
  const auto& o = resolved.at("optimizer");
  const auto& s = resolved.at("schedule");
  p.peak = o.at("peak").get<double>();
  p.initial = o.at("initial").get<double>();
  p.weight_decay = o.at("weight_decay").get<double>();
  p.total_epochs = s.at("epochs").get<std::size_t>();
  p.warmup_epochs = s.at("warmup_epochs").get<std::size_t>();
  return p;
}

namespace detail {

inline bool compatible(const json& def, const json& given) {
  if (def.is_boolean()) return given.is_boolean();
  if (def.is_string()) return given.is_string();
  if (def.is_number_unsigned() || def.is_number_integer()) {
    return given.is_number_unsigned() || (given.is_number_integer() && given.get<long long>() >= 0);
  }
  if (def.is_number()) return given.is_number();
  if (def.is_object()) return given.is_object();
  return def.type() == given.type();
}

inline void merge_checked(json& target, const json& given, const std::string& where) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string key = where + "/" + it.key();
    if (!target.contains(it.key())) fail(ErrorKind::Config, "config: unknown key " + key);
    json& slot = target[it.key()];
    if (!compatible(slot, it.value())) fail(ErrorKind::Config, "config: wrong type for " + key);
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

}  // namespace detail

/// Overlays a JSON config file onto `defaults`; unknown keys and type
/// mismatches are config errors.
inline void merge_config_file(json& defaults, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Data, "cannot open config " + path.string());
  json given;
  try {
    given = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "config " + path.filename().string() + ": " + e.what());
  }
  if (!given.is_object()) fail(ErrorKind::Format, "config " + path.filename().string() + ": top level must be an object");
  detail::merge_checked(defaults, given, "");
}

/// Binds command-line options to JSON pointers into the resolved config.
/// Option defaults are read from the defaults document so --help shows them.
class Binder {
 public:
  Binder(CLI::App& app, json& defaults) : app_(app), defaults_(defaults) {}

  template <typename T>
  CLI::Option* option(const std::string& flags, const std::string& pointer, const std::string& help) {
    const json::json_pointer ptr(pointer);
    auto value = std::make_shared<T>(defaults_.at(ptr).template get<T>());
    auto* opt = app_.add_option(flags, *value, help)->capture_default_str();
    apply_.push_back([opt, value, ptr](json& j) {
      if (opt->count() > 0) j[ptr] = *value;
    });
    return opt;
  }

  CLI::Option* flag(const std::string& flags, const std::string& pointer, const std::string& help) {
    const json::json_pointer ptr(pointer);
    auto value = std::make_shared<bool>(defaults_.at(ptr).get<bool>());
    auto* opt = app_.add_flag(flags, *value, help)->capture_default_str();
    apply_.push_back([opt, value, ptr](json& j) {
      if (opt->count() > 0) j[ptr] = *value;
    });
    return opt;
  }

  void apply(json& resolved) const {
    for (const auto& f : apply_) f(resolved);
  }

 private:
  CLI::App& app_;
  json& defaults_;
  std::vector<std::function<void(json&)>> apply_;
};

/// `<out>/<command>-<YYYYmmdd-HHMMSS>`, or `<out>/<name>` when a run name is
/// given; a numeric suffix avoids clobbering an existing directory.
inline std::filesystem::path make_run_dir(const std::filesystem::path& out, const std::string& command,
                                          const std::string& name) {
  std::string leaf = name;
  if (leaf.empty()) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    std::ostringstream s;
    s << command << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
    leaf = s.str();
  }
  auto dir = out / leaf;
  for (int n = 2; std::filesystem::exists(dir) && name.empty(); ++n) dir = out / (leaf + "-" + std::to_string(n));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Data, "cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace pointform::cli
