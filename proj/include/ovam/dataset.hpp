#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "ovam/backend.hpp"
#include "ovam/config.hpp"
#include "ovam/mask.hpp"
#include "ovam/optimizer.hpp"
#include "ovam/process.hpp"
#include "ovam/token_io.hpp"
#include "ovam/toy_backend.hpp"

namespace ovam {

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

inline constexpr const char* kDefaultTemplate = "A photograph of a <classname>";

/// The class slot may be written <classname> or ⟨classname⟩.
inline std::size_t count_class_slots(const std::string& tmpl, std::size_t* first = nullptr, std::size_t* len = nullptr) {
  std::size_t n = 0;
  for (const std::string slot : {"<classname>", "⟨classname⟩"})
    for (std::size_t pos = 0; (pos = tmpl.find(slot, pos)) != std::string::npos; pos += slot.size()) {
      if (n == 0 && first) {
        *first = pos;
        *len = slot.size();
      }
      ++n;
    }
  return n;
}

inline std::string fill_template(const std::string& tmpl, const std::string& cls) {
  std::size_t pos = 0, len = 0;
  require(count_class_slots(tmpl, &pos, &len) == 1, ErrorKind::configuration,
          "template must contain exactly one <classname> slot: '" + tmpl + "'");
  std::string out = tmpl;
  out.replace(pos, len, cls);
  return out;
}

struct PromptSource {
  enum class Kind { template_prompts, captions };
  Kind kind = Kind::template_prompts;
  std::string template_text = kDefaultTemplate;
  std::filesystem::path caption_file;
  std::vector<std::string> classes;
  int per_class_count = 1;  // captions: 0 keeps every match
  std::int64_t seed_base = 0;
  std::map<std::string, std::vector<std::string>> synonyms;  // class -> extra names
};

struct PromptItem {
  std::string id;
  std::string cls;
  std::string prompt;
  std::int64_t seed = 0;
  std::string caption_id;  // captions only
};

struct PromptPlan {
  std::vector<PromptItem> items;
  std::vector<std::string> warnings;
};

inline std::string format_id(std::size_t index) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << index;
  return os.str();
}

/// True if the caption's word tokens contain the name's tokens contiguously.
inline bool caption_mentions(const std::string& caption, const std::string& name) {
  const auto words = text::tokenize(caption);
  const auto needle = text::tokenize(name);
  if (needle.empty() || needle.size() > words.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= words.size(); ++i)
    if (std::equal(needle.begin(), needle.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) return true;
  return false;
}

inline PromptPlan build_prompts(const PromptSource& src) {
  require(!src.classes.empty(), ErrorKind::configuration, "no classes given");
  require(src.per_class_count >= 0, ErrorKind::configuration, "per_class_count must be non-negative");
  PromptPlan plan;
  std::size_t index = 0;
  auto push = [&](const std::string& cls, std::string prompt, std::string caption_id = {}) {
    plan.items.push_back({format_id(index), cls, std::move(prompt), src.seed_base + static_cast<std::int64_t>(index),
                          std::move(caption_id)});
    ++index;
  };

  if (src.kind == PromptSource::Kind::template_prompts) {
    require(count_class_slots(src.template_text) == 1, ErrorKind::configuration,
            "template must contain exactly one <classname> slot: '" + src.template_text + "'");
    for (const auto& cls : src.classes)
      for (int i = 0; i < src.per_class_count; ++i) push(cls, fill_template(src.template_text, cls));
    return plan;
  }

  std::ifstream in(src.caption_file);
  if (!in) throw Error(ErrorKind::io, "cannot read caption file " + src.caption_file.string());
  std::vector<std::pair<std::string, std::string>> captions;  // (id, caption)
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto& id = j.at("id");
      captions.emplace_back(id.is_string() ? id.get<std::string>() : id.dump(), j.at("caption").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::io, "caption file line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  for (const auto& cls : src.classes) {
    std::vector<std::string> names{cls};
    if (auto it = src.synonyms.find(cls); it != src.synonyms.end())
      names.insert(names.end(), it->second.begin(), it->second.end());
    int taken = 0;
    for (const auto& [cid, caption] : captions) {
      if (src.per_class_count > 0 && taken >= src.per_class_count) break;
      if (std::any_of(names.begin(), names.end(), [&](const auto& n) { return caption_mentions(caption, n); })) {
        push(cls, caption, cid);
        ++taken;
      }
    }
    if (taken == 0) plan.warnings.push_back("class '" + cls + "' has no matching captions");
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

enum class DropReason { none, clip_bottom, area_low, area_high, generation_failed };

inline std::string to_string(DropReason r) {
  switch (r) {
    case DropReason::none: return "none";
    case DropReason::clip_bottom: return "clip_bottom";
    case DropReason::area_low: return "area_low";
    case DropReason::area_high: return "area_high";
    case DropReason::generation_failed: return "generation_failed";
  }
  return "none";
}

inline DropReason parse_drop_reason(const std::string& s) {
  for (auto r : {DropReason::none, DropReason::clip_bottom, DropReason::area_low, DropReason::area_high,
                 DropReason::generation_failed})
    if (to_string(r) == s) return r;
  throw Error(ErrorKind::load, "unknown drop reason '" + s + "'");
}

struct ManifestEntry {
  std::string id;
  std::string cls;
  std::string prompt;
  std::int64_t seed = 0;
  std::string image_path;  // relative to the dataset directory
  std::string mask_path;
  std::optional<double> clip_score;
  double area_fraction = 0.0;
  bool kept = true;
  DropReason drop_reason = DropReason::none;
  std::string caption_id;
  std::string error;

  bool generated() const { return drop_reason != DropReason::generation_failed; }

  void drop(DropReason r) {
    if (!kept) return;  // the first reason sticks
    kept = false;
    drop_reason = r;
  }

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline std::string manifest_line(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["class"] = e.cls;
  j["prompt"] = e.prompt;
  j["seed"] = e.seed;
  j["image_path"] = e.image_path;
  j["mask_path"] = e.mask_path;
  j["clip_score"] = e.clip_score ? nlohmann::ordered_json(*e.clip_score) : nlohmann::ordered_json(nullptr);
  j["area_fraction"] = e.area_fraction;
  j["kept"] = e.kept;
  j["drop_reason"] = to_string(e.drop_reason);
  if (!e.caption_id.empty()) j["caption_id"] = e.caption_id;
  if (!e.error.empty()) j["error"] = e.error;
  return j.dump();
}

inline nlohmann::json to_json(const ManifestEntry& e) { return nlohmann::json::parse(manifest_line(e)); }

inline ManifestEntry entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.id = j.at("id").get<std::string>();
  e.cls = j.at("class").get<std::string>();
  e.prompt = j.at("prompt").get<std::string>();
  e.seed = j.at("seed").get<std::int64_t>();
  e.image_path = j.value("image_path", "");
  e.mask_path = j.value("mask_path", "");
  if (j.contains("clip_score") && j["clip_score"].is_number()) e.clip_score = j["clip_score"].get<double>();
  e.area_fraction = j.value("area_fraction", 0.0);
  e.kept = j.value("kept", true);
  e.drop_reason = parse_drop_reason(j.value("drop_reason", "none"));
  e.caption_id = j.value("caption_id", "");
  e.error = j.value("error", "");
  return e;
}

struct FilterRecord {
  std::string name;  // "clip" | "area"
  nlohmann::json settings;
  friend bool operator==(const FilterRecord&, const FilterRecord&) = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;  // sorted by id
  std::vector<FilterRecord> filters;   // in the order they ran
  nlohmann::json generation = nlohmann::json::object();

  std::size_t kept_count() const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](auto& e) { return e.kept; }));
  }
  void sort() {
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  }
};

inline std::string manifest_text(const DatasetManifest& m) {
  std::string out;
  for (const auto& e : m.entries) out += manifest_line(e) + "\n";
  return out;
}

inline nlohmann::ordered_json dataset_summary(const DatasetManifest& m) {
  nlohmann::ordered_json s;
  s["format"] = "ovam-dataset";
  s["version"] = 1;
  s["entries"] = m.entries.size();
  s["kept"] = m.kept_count();
  std::map<std::string, std::map<std::string, std::size_t>> per_class;
  for (const auto& e : m.entries) {
    auto& c = per_class[e.cls];
    c["total"] += 1;
    c[e.kept ? "kept" : "dropped"] += 1;
    c["drop_" + to_string(e.drop_reason)] += e.kept ? 0 : 1;
  }
  nlohmann::ordered_json classes = nlohmann::ordered_json::object();
  for (const auto& [cls, counts] : per_class) {
    nlohmann::ordered_json c;
    c["total"] = counts.count("total") ? counts.at("total") : 0;
    c["kept"] = counts.count("kept") ? counts.at("kept") : 0;
    c["dropped"] = counts.count("dropped") ? counts.at("dropped") : 0;
    for (auto r : {DropReason::clip_bottom, DropReason::area_low, DropReason::area_high, DropReason::generation_failed}) {
      const auto key = "drop_" + to_string(r);
      c[to_string(r)] = counts.count(key) ? counts.at(key) : 0;
    }
    classes[cls] = c;
  }
  s["classes"] = classes;
  s["filter_order"] = nlohmann::ordered_json::array();
  s["filters"] = nlohmann::ordered_json::array();
  for (const auto& f : m.filters) {
    s["filter_order"].push_back(f.name);
    s["filters"].push_back({{"name", f.name}, {"settings", nlohmann::ordered_json::parse(f.settings.dump())}});
  }
  s["generation"] = nlohmann::ordered_json::parse(m.generation.dump());
  return s;
}

/// Writes manifest.jsonl, dataset.json and lists/ (all.txt: every kept id,
/// <class>.txt per class).
inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "lists");
  write_file_text(dir / "manifest.jsonl", manifest_text(m));
  write_file_text(dir / "dataset.json", dataset_summary(m).dump(2) + "\n");
  std::map<std::string, std::string> lists;
  std::string all;
  for (const auto& e : m.entries) {
    if (!e.kept) continue;
    all += e.id + "\n";
    lists[e.cls] += e.id + "\n";
  }
  for (const auto& old : fs::directory_iterator(dir / "lists"))
    if (old.path().extension() == ".txt") fs::remove(old.path());
  write_file_text(dir / "lists" / "all.txt", all);
  for (const auto& [cls, ids] : lists) write_file_text(dir / "lists" / (cls + ".txt"), ids);
}

/// Reads manifest.jsonl (and dataset.json when present). A truncated final
/// line, as left by an interrupted writer, is ignored.
inline DatasetManifest load_manifest(const std::filesystem::path& path_or_dir) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::is_directory(path_or_dir) ? path_or_dir : path_or_dir.parent_path();
  const fs::path file = fs::is_directory(path_or_dir) ? dir / "manifest.jsonl" : path_or_dir;
  DatasetManifest m;
  if (!fs::exists(file)) throw Error(ErrorKind::io, "no manifest at " + file.string());
  std::ifstream in(file);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!detail::trim(line).empty()) lines.push_back(line);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      m.entries.push_back(entry_from_json(nlohmann::json::parse(lines[i])));
    } catch (const nlohmann::json::exception& e) {
      if (i + 1 == lines.size()) break;
      throw Error(ErrorKind::load, "manifest line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  if (fs::exists(dir / "dataset.json")) {
    try {
      const auto s = nlohmann::json::parse(read_file_text(dir / "dataset.json"));
      for (const auto& f : s.value("filters", nlohmann::json::array()))
        m.filters.push_back({f.at("name").get<std::string>(), f.at("settings")});
      m.generation = s.value("generation", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::load, std::string("malformed dataset.json: ") + e.what());
    }
  }
  m.sort();
  return m;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// How a class is attributed: a token file (optimized tokens) or the class
/// name itself.
struct ClassToken {
  std::optional<TokenFile> file;
  std::string source;  // token-file path or "name"
};

struct GenerationOptions {
  int steps = 0;  // 0: backend default
  BinarizationParams natural = BinarizationParams::natural();
  BinarizationParams optimized = BinarizationParams::optimized();
  bool use_crf = false;
  std::shared_ptr<const MaskRefiner> refiner;
  SelectionConfig selection;
  int workers = 1;
  std::size_t max_new_items = 0;  // stop after this many new entries (0: no limit)
};

inline std::string sanitize_file_name(const std::string& s) {
  std::string out;
  for (unsigned char c : s) out.push_back(std::isalnum(c) || c == '-' || c == '_' || c == '.' ? static_cast<char>(c) : '_');
  return out.empty() ? "_" : out;
}

/// Generates one image and pseudo-mask per prompt. Entries already present in
/// out_dir/manifest.jsonl (with their files on disk) are skipped, so an
/// interrupted run can be resumed; failed items are retried on resume.
inline DatasetManifest generate_dataset(const Backend& backend, const PromptPlan& prompts,
                                        const std::map<std::string, ClassToken>& tokens,
                                        const GenerationOptions& opt, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  require(opt.workers >= 1, ErrorKind::configuration, "workers must be at least 1");
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "masks");

  std::map<std::string, ManifestEntry> done;
  if (fs::exists(out_dir / "manifest.jsonl"))
    for (auto& e : load_manifest(out_dir).entries)
      if (e.generated() && fs::exists(out_dir / e.image_path) && fs::exists(out_dir / e.mask_path))
        done[e.id] = std::move(e);

  // Resolve attribution tokens per class up front so every worker sees the same.
  struct Resolved {
    TokenEmbeddingMatrix x;
    BinarizationParams params;
  };
  std::map<std::string, Resolved> resolved;
  for (const auto& item : prompts.items) {
    if (resolved.count(item.cls)) continue;
    auto it = tokens.find(item.cls);
    Resolved r;
    if (it != tokens.end() && it->second.file) {
      r.x = it->second.file->tokens;
      r.params = opt.optimized;
    } else {
      r.x = init_attribution_tokens(item.cls, backend);
      r.params = opt.natural;
    }
    require(r.x.n_tokens() >= 2, ErrorKind::argument, "token for class '" + item.cls + "' needs two rows");
    r.params.use_crf = opt.use_crf;
    r.params.validate();
    resolved[item.cls] = std::move(r);
  }

  std::vector<const PromptItem*> todo;
  for (const auto& item : prompts.items)
    if (!done.count(item.id)) todo.push_back(&item);
  if (opt.max_new_items && todo.size() > opt.max_new_items) todo.resize(opt.max_new_items);

  const int steps = opt.steps > 0 ? opt.steps : backend.default_timesteps();
  std::mutex append_mutex;
  std::ofstream journal(out_dir / "manifest.jsonl", std::ios::app);
  std::map<std::string, ManifestEntry> fresh;
  std::atomic<std::size_t> next{0};

  auto work = [&] {
    for (std::size_t i; (i = next++) < todo.size();) {
      const PromptItem& item = *todo[i];
      ManifestEntry e;
      e.id = item.id;
      e.cls = item.cls;
      e.prompt = item.prompt;
      e.seed = item.seed;
      e.caption_id = item.caption_id;
      try {
        const auto& r = resolved.at(item.cls);
        const auto trace = backend.generate_with_trace(item.prompt, item.seed, steps);
        auto mask = make_pseudo_mask(trace, r.x, 1, r.params, opt.refiner.get(), opt.selection);
        mask.class_label = item.cls;
        e.image_path = "images/" + item.id + ".png";
        e.mask_path = "masks/" + item.id + ".png";
        write_png_rgb(out_dir / e.image_path, trace.image);
        write_mask(out_dir / e.mask_path, mask, r.params);
        e.area_fraction = mask.area_fraction();
      } catch (const std::exception& ex) {
        e.image_path.clear();
        e.mask_path.clear();
        e.kept = false;
        e.drop_reason = DropReason::generation_failed;
        e.error = ex.what();
      }
      std::lock_guard lock(append_mutex);
      journal << manifest_line(e) << "\n";
      journal.flush();
      fresh[e.id] = std::move(e);
    }
  };
  std::vector<std::thread> pool;
  const std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(opt.workers), std::max<std::size_t>(todo.size(), 1));
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  journal.close();

  DatasetManifest m;
  for (auto& [id, e] : done) m.entries.push_back(std::move(e));
  for (auto& [id, e] : fresh) m.entries.push_back(std::move(e));
  m.sort();
  nlohmann::json gen;
  gen["backend"] = backend.id();
  gen["steps"] = steps;
  nlohmann::json cls_tokens = nlohmann::json::object();
  for (const auto& [cls, r] : resolved) {
    auto it = tokens.find(cls);
    cls_tokens[cls] = {{"source", it != tokens.end() && it->second.file ? it->second.source : "name"},
                       {"tau", r.params.tau},
                       {"alpha", r.params.alpha},
                       {"crf", r.params.use_crf}};
  }
  gen["classes"] = cls_tokens;
  m.generation = gen;
  save_manifest(m, out_dir);
  return m;
}

// ---------------------------------------------------------------------------
// Scoring and filters
// ---------------------------------------------------------------------------

struct ScoreRequest {
  const ManifestEntry* entry;
  std::filesystem::path image_path;  // absolute
  std::string text;
};

/// Image-text similarity used by the CLIP filter.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::string name() const = 0;
  virtual double score(const ScoreRequest& req) const = 0;
};

/// Scores an entry by its numeric id; for tests and dry runs.
class IdScorer final : public Scorer {
 public:
  std::string name() const override { return "id"; }
  double score(const ScoreRequest& req) const override { return std::stod(req.entry->id); }
};

/// Deterministic stand-in for an image-text model on the toy backend: cosine
/// between the image's mean-centred mean colour and the first three
/// components of the toy text embedding of the prompt's last word token.
class ToyScorer final : public Scorer {
 public:
  std::string name() const override { return "toy"; }
  double score(const ScoreRequest& req) const override {
    const auto img = read_png_rgb(req.image_path);
    double mean[3] = {0, 0, 0};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) mean[i % 3] += img.pixels[i];
    const double n = static_cast<double>(img.width * img.height);
    for (auto& v : mean) v = v / n / 255.0;
    const double grey = (mean[0] + mean[1] + mean[2]) / 3.0;
    const auto words = text::tokenize(req.text);
    const auto row = backend_.token_row(words.empty() ? std::string(kEndToken) : words.back());
    double dot = 0, na = 0, nb = 0;
    for (int c = 0; c < 3; ++c) {
      const double a = mean[c] - grey;
      dot += a * row[c];
      na += a * a;
      nb += row[c] * row[c];
    }
    return na > 0 && nb > 0 ? dot / std::sqrt(na * nb) : 0.0;
  }

 private:
  ToyBackend backend_;
};

/// External scorer: runs the command template with {image} and {text} and
/// reads a single number from {out}.
class CommandScorer final : public Scorer {
 public:
  explicit CommandScorer(std::string tmpl) : template_(std::move(tmpl)) {
    if (template_.empty()) throw Error(ErrorKind::scorer_unavailable, "scorer command is empty");
  }
  std::string name() const override { return "command"; }
  double score(const ScoreRequest& req) const override {
    const auto out = std::filesystem::temp_directory_path() /
                     ("ovam-score-" + std::to_string(::getpid()) + "-" + std::to_string(counter_++) + ".txt");
    const int rc = run_process(
        expand_command(template_, {{"image", req.image_path.string()}, {"text", req.text}, {"out", out.string()}}));
    if (rc != 0) throw Error(ErrorKind::scorer_unavailable, "scorer command failed with status " + std::to_string(rc));
    if (!std::filesystem::exists(out)) throw Error(ErrorKind::scorer_unavailable, "scorer command wrote no output");
    const auto txt = read_file_text(out);
    std::filesystem::remove(out);
    try {
      return std::stod(txt);
    } catch (const std::exception&) {
      throw Error(ErrorKind::scorer_unavailable, "scorer command did not print a number");
    }
  }

 private:
  std::string template_;
  mutable std::atomic<std::size_t> counter_{0};
};

/// "id", "toy" or "command:<template>"; anything else is unavailable.
inline std::shared_ptr<const Scorer> make_scorer(const std::string& spec) {
  if (spec == "id") return std::make_shared<IdScorer>();
  if (spec == "toy") return std::make_shared<ToyScorer>();
  if (spec.rfind("command:", 0) == 0) return std::make_shared<CommandScorer>(spec.substr(8));
  throw Error(ErrorKind::scorer_unavailable, "no image-text scorer named '" + spec + "'");
}

/// Per class, drops the floor((1 - keep_fraction) * n_c) lowest-scoring
/// generated entries (ties: lower id first). Ranking always covers every
/// generated entry of the class, whatever other filters already decided.
inline DatasetManifest clip_filter(DatasetManifest m, const Scorer* scorer, double keep_fraction = 0.7,
                                   const std::string& prompt_template = kDefaultTemplate,
                                   const std::filesystem::path& dataset_dir = {}) {
  if (!scorer) throw Error(ErrorKind::scorer_unavailable, "CLIP filter needs an image-text scorer");
  require(keep_fraction >= 0.0 && keep_fraction <= 1.0, ErrorKind::argument, "keep_fraction must be in [0, 1]");
  require(count_class_slots(prompt_template) == 1, ErrorKind::configuration,
          "template must contain exactly one <classname> slot");
  std::map<std::string, std::vector<ManifestEntry*>> by_class;
  for (auto& e : m.entries)
    if (e.generated()) by_class[e.cls].push_back(&e);
  for (auto& [cls, group] : by_class) {
    const auto text = fill_template(prompt_template, cls);
    for (auto* e : group) e->clip_score = scorer->score({e, dataset_dir / e->image_path, text});
    std::sort(group.begin(), group.end(), [](const ManifestEntry* a, const ManifestEntry* b) {
      if (*a->clip_score != *b->clip_score) return *a->clip_score < *b->clip_score;
      return a->id < b->id;
    });
    const auto n_drop =
        static_cast<std::size_t>(std::floor((1.0 - keep_fraction) * static_cast<double>(group.size()) + 1e-9));
    for (std::size_t i = 0; i < n_drop; ++i) group[i]->drop(DropReason::clip_bottom);
  }
  m.filters.push_back({"clip", {{"keep_fraction", keep_fraction}, {"template", prompt_template}, {"scorer", scorer->name()}}});
  return m;
}

/// Drops generated entries whose mask area lies outside [low, high].
inline DatasetManifest area_filter(DatasetManifest m, double low = 0.05, double high = 0.95) {
  require(low <= high, ErrorKind::argument, "area bounds are inverted");
  for (auto& e : m.entries) {
    if (!e.generated()) continue;
    if (e.area_fraction < low) e.drop(DropReason::area_low);
    else if (e.area_fraction > high) e.drop(DropReason::area_high);
  }
  m.filters.push_back({"area", {{"low", low}, {"high", high}}});
  return m;
}

/// Clears previous filter verdicts (generation failures stay).
inline DatasetManifest reset_filters(DatasetManifest m) {
  for (auto& e : m.entries) {
    if (!e.generated()) continue;
    e.kept = true;
    e.drop_reason = DropReason::none;
    e.clip_score.reset();
  }
  m.filters.clear();
  return m;
}

}  // namespace ovam
