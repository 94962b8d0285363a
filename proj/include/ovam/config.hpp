#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ovam/crf.hpp"
#include "ovam/io_util.hpp"
#include "ovam/mask.hpp"
#include "ovam/ovam.hpp"

namespace ovam {

/// Settings file: one `key = value` per line, `#` starts a comment.
///
///   backend                  toy | external                      (env OVAM_BACKEND wins)
///   external.command         command template for the external backend
///   steps                    denoising steps (0: backend default)
///   tau.natural, alpha.natural       binarization for text prompts   (0.4, 0.85)
///   tau.optimized, alpha.optimized   binarization for token files    (0.8, 0.95)
///   refiner                  identity | dcrf | command:<template>
///   crf.w1, crf.alpha, crf.beta, crf.w2, crf.gamma, crf.iterations, crf.unary_confidence
///   selection.blocks         comma-separated cross block ids (empty: all)
///   selection.timesteps      all | single | early | late
///   selection.pivot          step index used by single/early/late
///   selection.heads          comma-separated head indices (empty: all)
///   workers                  dataset generation threads
///   scorer                   id | toy | command:<template>
struct Settings {
  std::string backend = "toy";
  std::string external_command;
  int steps = 0;
  BinarizationParams natural = BinarizationParams::natural();
  BinarizationParams optimized = BinarizationParams::optimized();
  std::string refiner = "dcrf";
  CrfParams crf;
  SelectionConfig selection;
  int workers = 1;
  std::string scorer = "toy";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::configuration, "setting '" + key + "' expects a number, got '" + v + "'");
}

inline int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int i = std::stoi(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::configuration, "setting '" + key + "' expects an integer, got '" + v + "'");
}

}  // namespace detail

inline std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
  std::vector<int> out;
  for (const auto& item : detail::split_list(s)) out.push_back(detail::to_int(key, item));
  return out;
}

inline void apply_setting(Settings& cfg, const std::string& key, const std::string& value) {
  using detail::to_double;
  using detail::to_int;
  if (key == "backend") cfg.backend = value;
  else if (key == "external.command") cfg.external_command = value;
  else if (key == "steps") cfg.steps = to_int(key, value);
  else if (key == "tau.natural") cfg.natural.tau = to_double(key, value);
  else if (key == "alpha.natural") cfg.natural.alpha = to_double(key, value);
  else if (key == "tau.optimized") cfg.optimized.tau = to_double(key, value);
  else if (key == "alpha.optimized") cfg.optimized.alpha = to_double(key, value);
  else if (key == "refiner") cfg.refiner = value;
  else if (key == "crf.w1") cfg.crf.w1 = to_double(key, value);
  else if (key == "crf.alpha") cfg.crf.alpha = to_double(key, value);
  else if (key == "crf.beta") cfg.crf.beta = to_double(key, value);
  else if (key == "crf.w2") cfg.crf.w2 = to_double(key, value);
  else if (key == "crf.gamma") cfg.crf.gamma = to_double(key, value);
  else if (key == "crf.iterations") cfg.crf.iterations = to_int(key, value);
  else if (key == "crf.unary_confidence") cfg.crf.unary_confidence = to_double(key, value);
  else if (key == "selection.blocks") cfg.selection.blocks = detail::split_list(value);
  else if (key == "selection.timesteps") cfg.selection.timesteps = parse_timestep_strategy(value);
  else if (key == "selection.pivot") cfg.selection.pivot = to_int(key, value);
  else if (key == "selection.heads") cfg.selection.heads = parse_int_list(key, value);
  else if (key == "workers") cfg.workers = to_int(key, value);
  else if (key == "scorer") cfg.scorer = value;
  else throw Error(ErrorKind::configuration, "unknown setting '" + key + "'");
}

inline Settings parse_settings(const std::string& text) {
  Settings cfg;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::configuration, "line " + std::to_string(line_no) + ": expected key = value");
    apply_setting(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  try {
    cfg.natural.validate();
    cfg.optimized.validate();
    cfg.crf.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::configuration, e.what());
  }
  require(cfg.workers >= 1, ErrorKind::configuration, "workers must be at least 1");
  return cfg;
}

/// Reads the file if given, then applies the OVAM_BACKEND override.
inline Settings load_settings(const std::filesystem::path& path = {}) {
  Settings cfg = path.empty() ? Settings{} : parse_settings(read_file_text(path));
  if (const char* env = std::getenv("OVAM_BACKEND"); env && *env) cfg.backend = env;
  return cfg;
}

}  // namespace ovam
