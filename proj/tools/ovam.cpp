// ovam: command-line front end.
//
//   ovam generate  --prompt P --seed S [--steps N] --out TRACE_DIR
//   ovam heatmap   --trace T (--prompt P | --token DIR) [--token-index K] [--out PREFIX]
//   ovam mask      --trace T (--prompt P | --token DIR) [--tau --alpha --crf] --out MASK.png
//   ovam optimize  --image-pair P... --class C [--lr --decay --decay-every --epochs] --out DIR
//   ovam dataset   --classes a,b [--per-class N | --captions F] [--token cls=DIR] --out DIR
//   ovam filter    --dataset DIR [--keep 0.7] [--area-low 0.05 --area-high 0.95]
//   ovam eval      --manifest M --gt G [--json]
//   ovam serve     --data DIR [--host H] [--port P]
//
// Exit status: 0 success, 1 failure (JSON error on stderr), 2 usage error,
// 3 evaluation with missing ground truth.

#include <csignal>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ovam/all.hpp"
#include "ovam/external_backend.hpp"
#include "ovam/service.hpp"

namespace fs = std::filesystem;
using ovam::Error;
using ovam::ErrorKind;

namespace {

struct Common {
  std::string config;
  std::string backend;
};

ovam::Settings settings(const Common& c) {
  auto s = ovam::load_settings(c.config);
  if (!c.backend.empty()) s.backend = c.backend;
  return s;
}

std::shared_ptr<const ovam::Backend> backend_for(const ovam::Settings& s) {
  return ovam::make_backend(s.backend, s.external_command);
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

struct SelectionFlags {
  std::string blocks, timesteps, heads, normalization;
  int pivot = -1;

  void add(CLI::App* app) {
    app->add_option("--blocks", blocks, "Comma-separated cross block ids");
    app->add_option("--timesteps", timesteps, "all | single | early | late");
    app->add_option("--pivot", pivot, "Step index for single/early/late");
    app->add_option("--heads", heads, "Comma-separated head indices");
    app->add_option("--normalization", normalization, "raw_sum | mean_over_slices");
  }

  ovam::SelectionConfig apply(ovam::SelectionConfig sel) const {
    if (!blocks.empty()) sel.blocks = ovam::detail::split_list(blocks);
    if (!timesteps.empty()) sel.timesteps = ovam::parse_timestep_strategy(timesteps);
    if (pivot >= 0) sel.pivot = pivot;
    if (!heads.empty()) sel.heads = ovam::parse_int_list("--heads", heads);
    if (!normalization.empty()) sel.normalization = ovam::parse_normalization(normalization);
    return sel;
  }
};

struct AttributionFlags {
  std::string prompt;
  std::string token_dir;
  std::size_t index = 1;

  void add(CLI::App* app) {
    auto* p = app->add_option("--prompt", prompt, "Attribution prompt");
    auto* t = app->add_option("--token", token_dir, "Token directory (token.json + token.f32)");
    p->excludes(t);
    app->add_option("--token-index", index, "Row of the attribution embedding to map")->capture_default_str();
  }

  /// Returns the embedding and whether it came from a token file.
  std::pair<ovam::TokenEmbeddingMatrix, bool> resolve(const ovam::Backend& backend) const {
    if (!token_dir.empty()) return {ovam::load_token(token_dir).tokens, true};
    if (prompt.empty()) throw Error(ErrorKind::argument, "give --prompt or --token");
    return {backend.encode_text(prompt), false};
  }
};

int cmd_generate(const Common& c, const std::string& prompt, std::int64_t seed, int steps, const fs::path& out) {
  const auto s = settings(c);
  const auto backend = backend_for(s);
  if (steps <= 0) steps = s.steps > 0 ? s.steps : backend->default_timesteps();
  const auto trace = backend->generate_with_trace(prompt, seed, steps);
  ovam::save_trace(trace, out);
  print({{"trace", out.string()},
         {"image", (out / "image.png").string()},
         {"backend_id", trace.backend_id},
         {"width", trace.image.width},
         {"height", trace.image.height}});
  return 0;
}

int cmd_heatmap(const Common& c, const fs::path& trace_dir, const AttributionFlags& attr, const SelectionFlags& selflags,
                std::size_t width, std::size_t height, double tau, fs::path out) {
  const auto s = settings(c);
  const auto backend = backend_for(s);
  const auto trace = ovam::load_trace(trace_dir);
  const auto [x, optimized] = attr.resolve(*backend);
  auto sel = selflags.apply(s.selection);
  sel.output_w = width;
  sel.output_h = height;
  const auto h = ovam::compute_ovam(trace, x, sel);
  if (attr.index >= h.maps.size())
    throw Error(ErrorKind::argument, "--token-index " + std::to_string(attr.index) + " out of range for " +
                                         std::to_string(h.maps.size()) + " tokens");
  if (out.empty()) out = trace_dir / ("heatmap_" + std::to_string(attr.index));
  if (tau <= 0.0) tau = optimized ? s.optimized.tau : s.natural.tau;
  ovam::write_heatmap(out, h, attr.index);
  const auto st = ovam::heatmap_stats(h.maps[attr.index], tau);
  print({{"raster", out.string() + ".f32"},
         {"png", out.string() + ".png"},
         {"metadata", out.string() + ".json"},
         {"label", h.labels[attr.index]},
         {"width", h.width()},
         {"height", h.height()},
         {"stats", {{"max", st.max}, {"area_at_tau", st.area_at_tau}, {"tau", tau}}}});
  return 0;
}

struct MaskFlags {
  double tau = -1.0, alpha = -1.0;
  bool crf = false, no_self_attention = false, latent_threshold = false;
};

int cmd_mask(const Common& c, const fs::path& trace_dir, const AttributionFlags& attr, const SelectionFlags& selflags,
             const MaskFlags& mf, const fs::path& out) {
  const auto s = settings(c);
  const auto backend = backend_for(s);
  const auto trace = ovam::load_trace(trace_dir);
  const auto [x, optimized] = attr.resolve(*backend);
  auto p = optimized ? s.optimized : s.natural;
  if (mf.tau >= 0.0) p.tau = mf.tau;
  if (mf.alpha >= 0.0) p.alpha = mf.alpha;
  p.use_crf = mf.crf;
  p.use_self_attention = !mf.no_self_attention;
  p.threshold_at_latent = mf.latent_threshold;
  const auto refiner = ovam::make_refiner(s.refiner, s.crf);
  const auto m = ovam::make_pseudo_mask(trace, x, attr.index, p, refiner.get(), selflags.apply(s.selection));
  ovam::write_mask(out, m, p);
  print({{"mask", out.string()}, {"label", m.class_label}, {"area_fraction", m.area_fraction()}, {"tau", p.tau},
         {"alpha", p.alpha}, {"crf", p.use_crf}});
  return 0;
}

/// "TRACE_DIR,MASK.png" or a directory holding trace/ (or a trace itself) and
/// annotation.png.
ovam::TrainingPair load_pair(const std::string& spec) {
  fs::path trace_dir, mask_path;
  if (const auto comma = spec.find(','); comma != std::string::npos) {
    trace_dir = spec.substr(0, comma);
    mask_path = spec.substr(comma + 1);
  } else {
    const fs::path dir(spec);
    trace_dir = fs::exists(dir / "trace" / "trace.json") ? dir / "trace" : dir;
    mask_path = dir / "annotation.png";
  }
  if (!fs::exists(mask_path)) throw Error(ErrorKind::io, "no annotation at " + mask_path.string());
  auto trace = std::make_shared<const ovam::DenoisingTrace>(ovam::load_trace(trace_dir));
  const auto gt = ovam::read_mask(mask_path);
  if (gt.width() != trace->image.width || gt.height() != trace->image.height)
    throw Error(ErrorKind::dimension, "annotation " + mask_path.string() + " is " +
                                          ovam::dims_string(gt.width(), gt.height()) + " but the image is " +
                                          ovam::dims_string(trace->image.width, trace->image.height));
  return {trace, ovam::GroundTruthMask::from_foreground(gt.grid)};
}

int cmd_optimize(const Common& c, const std::vector<std::string>& pair_specs, const std::string& cls,
                 ovam::OptimizerConfig cfg, const SelectionFlags& selflags, const fs::path& out, bool progress) {
  const auto s = settings(c);
  const auto backend = backend_for(s);
  std::vector<ovam::TrainingPair> pairs;
  for (const auto& p : pair_specs) pairs.push_back(load_pair(p));
  cfg.selection = selflags.apply(s.selection);
  const auto init = ovam::init_attribution_tokens(cls, *backend);

  ovam::OptimizationResult r;
  bool diverged = false;
  std::string divergence;
  try {
    r = ovam::optimize_tokens(pairs, init, cfg, [&](int epoch, double loss, double lr) {
      if (progress) std::cerr << nlohmann::json{{"epoch", epoch}, {"loss", loss}, {"lr", lr}}.dump() << "\n";
    });
  } catch (const ovam::DivergenceError& e) {
    r = e.partial();
    diverged = true;
    divergence = e.what();
  }

  ovam::TokenFile tf;
  tf.label = cls;
  tf.backend_id = backend->id();
  tf.tokens = r.best_tokens;
  tf.best_loss = r.best_loss;
  tf.has_loss = std::isfinite(r.best_loss);
  std::vector<std::string> sources(pair_specs.begin(), pair_specs.end());
  tf.training = {{"learning_rate", cfg.learning_rate},
                 {"decay_factor", cfg.decay_factor},
                 {"decay_every", cfg.decay_every},
                 {"epochs", cfg.epochs},
                 {"best_epoch", r.best_epoch + 1},
                 {"initial_loss", r.loss_history.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.loss_history.front())},
                 {"pairs", sources},
                 {"diverged", diverged}};
  ovam::save_token(tf, out);
  print({{"token", out.string()},
         {"best_loss", tf.has_loss ? nlohmann::json(r.best_loss) : nlohmann::json(nullptr)},
         {"best_epoch", r.best_epoch + 1},
         {"epochs_run", r.loss_history.size()},
         {"diverged", diverged}});
  if (diverged) throw Error(ErrorKind::divergence, divergence + " (best tokens so far saved to " + out.string() + ")");
  return 0;
}

struct DatasetFlags {
  std::string classes, templ = ovam::kDefaultTemplate, captions;
  int per_class = 1;
  std::int64_t seed_base = 0;
  std::vector<std::string> tokens, synonyms;
  bool crf = false;
  int workers = 0, steps = 0;
  std::size_t max_items = 0;
};

std::pair<std::string, std::string> split_assignment(const std::string& s, const char* flag) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(ErrorKind::argument, std::string(flag) + " expects class=value, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

int cmd_dataset(const Common& c, const DatasetFlags& f, const SelectionFlags& selflags, const fs::path& out) {
  const auto s = settings(c);
  const auto backend = backend_for(s);
  ovam::PromptSource src;
  src.classes = ovam::detail::split_list(f.classes);
  src.per_class_count = f.per_class;
  src.seed_base = f.seed_base;
  src.template_text = f.templ;
  if (!f.captions.empty()) {
    src.kind = ovam::PromptSource::Kind::captions;
    src.caption_file = f.captions;
  }
  for (const auto& syn : f.synonyms) {
    auto [cls, names] = split_assignment(syn, "--synonym");
    for (auto& n : ovam::detail::split_list(names)) src.synonyms[cls].push_back(n);
  }
  const auto plan = ovam::build_prompts(src);
  for (const auto& w : plan.warnings) std::cerr << "warning: " << w << "\n";

  std::map<std::string, ovam::ClassToken> tokens;
  for (const auto& t : f.tokens) {
    auto [cls, dir] = split_assignment(t, "--token");
    tokens[cls] = {ovam::load_token(dir), dir};
  }

  ovam::GenerationOptions opt;
  opt.steps = f.steps > 0 ? f.steps : s.steps;
  opt.natural = s.natural;
  opt.optimized = s.optimized;
  opt.use_crf = f.crf;
  opt.refiner = ovam::make_refiner(s.refiner, s.crf);
  opt.selection = selflags.apply(s.selection);
  opt.workers = f.workers > 0 ? f.workers : s.workers;
  opt.max_new_items = f.max_items;
  const auto m = ovam::generate_dataset(*backend, plan, tokens, opt, out);
  std::size_t failed = 0;
  for (const auto& e : m.entries) failed += !e.generated();
  print({{"dataset", out.string()}, {"entries", m.entries.size()}, {"failed", failed}, {"prompts", plan.items.size()}});
  return 0;
}

int cmd_filter(const Common& c, const fs::path& dir, double keep, bool no_clip, double low, double high,
               bool no_area, std::string scorer_spec, const std::string& templ) {
  const auto s = settings(c);
  auto m = ovam::reset_filters(ovam::load_manifest(dir));
  const auto before = m.kept_count();
  if (!no_clip) {
    if (scorer_spec.empty()) scorer_spec = s.scorer;
    const auto scorer = ovam::make_scorer(scorer_spec);
    m = ovam::clip_filter(std::move(m), scorer.get(), keep, templ, dir);
  }
  if (!no_area) m = ovam::area_filter(std::move(m), low, high);
  ovam::save_manifest(m, dir);
  std::map<std::string, std::size_t> reasons;
  for (const auto& e : m.entries)
    if (!e.kept) ++reasons[ovam::to_string(e.drop_reason)];
  print({{"dataset", dir.string()}, {"entries", m.entries.size()}, {"generated", before}, {"kept", m.kept_count()},
         {"dropped", reasons}});
  return 0;
}

int cmd_eval(const fs::path& manifest, const fs::path& gt, const std::string& classes, bool as_json) {
  const auto m = ovam::load_manifest(manifest);
  const fs::path dir = fs::is_directory(manifest) ? manifest : manifest.parent_path();
  const auto report = ovam::evaluate_dataset(m, dir, gt, ovam::detail::split_list(classes));
  if (as_json) print(report_json(report));
  else std::cout << ovam::report_table(report);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  if (!report.complete()) {
    std::cerr << nlohmann::json{{"error", "missing_ground_truth"}, {"entries", report.missing_ground_truth}}.dump()
              << "\n";
    return 3;
  }
  return 0;
}

ovam::Service* g_service = nullptr;

int cmd_serve(const Common& c, const fs::path& data, const std::string& host, int port) {
  const auto s = settings(c);
  ovam::Service service(backend_for(s), data, s);
  if (port == 0) port = service.bind_any(host);
  else if (!service.bind(host, port)) port = -1;
  if (port < 0) throw Error(ErrorKind::io, "cannot bind " + host);
  g_service = &service;
  std::signal(SIGINT, [](int) { if (g_service) g_service->stop(); });
  std::signal(SIGTERM, [](int) { if (g_service) g_service->stop(); });
  print({{"listening", "http://" + host + ":" + std::to_string(port)}, {"data", data.string()}});
  std::cout.flush();
  service.run();
  g_service = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary attention maps for diffusion models"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "Settings file (key = value)");
  app.add_option("--backend", common.backend, "Backend id (toy | external)");

  auto* gen = app.add_subcommand("generate", "Generate an image and store its attention trace");
  std::string gen_prompt;
  std::int64_t gen_seed = 0;
  int gen_steps = 0;
  std::string gen_out;
  gen->add_option("--prompt", gen_prompt)->required();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--steps", gen_steps, "Denoising steps (default: backend)");
  gen->add_option("--out", gen_out, "Trace directory")->required();

  auto* heat = app.add_subcommand("heatmap", "Attribution heatmap for a stored trace");
  std::string heat_trace, heat_out;
  AttributionFlags heat_attr;
  SelectionFlags heat_sel;
  std::size_t heat_w = 0, heat_h = 0;
  double heat_tau = -1.0;
  heat->add_option("--trace", heat_trace)->required();
  heat_attr.add(heat);
  heat_sel.add(heat);
  heat->add_option("--width", heat_w, "Output width (default: latent)");
  heat->add_option("--height", heat_h, "Output height (default: latent)");
  heat->add_option("--tau", heat_tau, "Threshold used for the reported area");
  heat->add_option("--out", heat_out, "Output prefix");

  auto* mask = app.add_subcommand("mask", "Binary pseudo-mask for a stored trace");
  std::string mask_trace, mask_out;
  AttributionFlags mask_attr;
  SelectionFlags mask_sel;
  MaskFlags mask_flags;
  mask->add_option("--trace", mask_trace)->required();
  mask_attr.add(mask);
  mask_sel.add(mask);
  mask->add_option("--tau", mask_flags.tau);
  mask->add_option("--alpha", mask_flags.alpha);
  mask->add_flag("--crf", mask_flags.crf, "Refine with the configured refiner");
  mask->add_flag("--no-self-attention", mask_flags.no_self_attention);
  mask->add_flag("--latent-threshold", mask_flags.latent_threshold, "Threshold at latent resolution");
  mask->add_option("--out", mask_out, "Mask PNG path")->required();

  auto* opt = app.add_subcommand("optimize", "Optimize an attribution token from annotated images");
  std::vector<std::string> opt_pairs;
  std::string opt_class, opt_out;
  ovam::OptimizerConfig opt_cfg;
  SelectionFlags opt_sel;
  bool opt_progress = false;
  opt->add_option("--image-pair", opt_pairs, "TRACE_DIR,MASK.png or a directory with annotation.png")->required();
  opt->add_option("--class", opt_class)->required();
  opt->add_option("--lr", opt_cfg.learning_rate)->capture_default_str();
  opt->add_option("--decay", opt_cfg.decay_factor)->capture_default_str();
  opt->add_option("--decay-every", opt_cfg.decay_every)->capture_default_str();
  opt->add_option("--epochs", opt_cfg.epochs)->capture_default_str();
  opt_sel.add(opt);
  opt->add_flag("--progress", opt_progress, "Print per-epoch JSON to stderr");
  opt->add_option("--out", opt_out, "Token directory")->required();

  auto* ds = app.add_subcommand("dataset", "Generate a synthetic segmentation dataset");
  DatasetFlags ds_flags;
  SelectionFlags ds_sel;
  std::string ds_out;
  ds->add_option("--classes", ds_flags.classes, "Comma-separated class names")->required();
  ds->add_option("--per-class", ds_flags.per_class)->capture_default_str();
  ds->add_option("--seed-base", ds_flags.seed_base)->capture_default_str();
  ds->add_option("--template", ds_flags.templ)->capture_default_str();
  ds->add_option("--captions", ds_flags.captions, "JSONL file of {caption, id}");
  ds->add_option("--synonym", ds_flags.synonyms, "class=name1,name2 (captions)");
  ds->add_option("--token", ds_flags.tokens, "class=TOKEN_DIR");
  ds->add_flag("--crf", ds_flags.crf);
  ds->add_option("--workers", ds_flags.workers);
  ds->add_option("--steps", ds_flags.steps);
  ds->add_option("--max-items", ds_flags.max_items, "Stop after this many new items");
  ds_sel.add(ds);
  ds->add_option("--out", ds_out)->required();

  auto* flt = app.add_subcommand("filter", "Apply the CLIP and mask-area filters to a dataset");
  std::string flt_dir, flt_scorer, flt_template = ovam::kDefaultTemplate;
  double flt_keep = 0.7, flt_low = 0.05, flt_high = 0.95;
  bool flt_no_clip = false, flt_no_area = false;
  flt->add_option("--dataset", flt_dir)->required();
  flt->add_option("--keep", flt_keep, "Fraction kept per class by the CLIP filter")->capture_default_str();
  flt->add_option("--area-low", flt_low)->capture_default_str();
  flt->add_option("--area-high", flt_high)->capture_default_str();
  flt->add_option("--scorer", flt_scorer, "id | toy | command:<template>");
  flt->add_option("--template", flt_template)->capture_default_str();
  flt->add_flag("--no-clip", flt_no_clip);
  flt->add_flag("--no-area", flt_no_area);

  auto* ev = app.add_subcommand("eval", "Per-class IoU and mIoU against ground truth");
  std::string ev_manifest, ev_gt, ev_classes;
  bool ev_json = false;
  ev->add_option("--manifest", ev_manifest, "manifest.jsonl or dataset directory")->required();
  ev->add_option("--gt", ev_gt, "Directory of <id>.png ground truth")->required();
  ev->add_option("--classes", ev_classes, "Column order");
  ev->add_flag("--json", ev_json);

  auto* srv = app.add_subcommand("serve", "Run the HTTP service");
  std::string srv_data = "ovam-data", srv_host = "127.0.0.1";
  int srv_port = 8080;
  srv->add_option("--data", srv_data)->capture_default_str();
  srv->add_option("--host", srv_host)->capture_default_str();
  srv->add_option("--port", srv_port, "0 picks a free port")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_generate(common, gen_prompt, gen_seed, gen_steps, gen_out);
    if (*heat) return cmd_heatmap(common, heat_trace, heat_attr, heat_sel, heat_w, heat_h, heat_tau, heat_out);
    if (*mask) return cmd_mask(common, mask_trace, mask_attr, mask_sel, mask_flags, mask_out);
    if (*opt) return cmd_optimize(common, opt_pairs, opt_class, opt_cfg, opt_sel, opt_out, opt_progress);
    if (*ds) return cmd_dataset(common, ds_flags, ds_sel, ds_out);
    if (*flt)
      return cmd_filter(common, flt_dir, flt_keep, flt_no_clip, flt_low, flt_high, flt_no_area, flt_scorer, flt_template);
    if (*ev) return cmd_eval(ev_manifest, ev_gt, ev_classes, ev_json);
    if (*srv) return cmd_serve(common, srv_data, srv_host, srv_port);
  } catch (const Error& e) {
    std::cerr << nlohmann::json{{"error", e.code()}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "internal_error"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 2;
}
