#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "json.hpp"
#include "ovam/backend.hpp"
#include "ovam/process.hpp"
#include "ovam/token_io.hpp"
#include "ovam/toy_backend.hpp"
#include "ovam/trace_io.hpp"

namespace ovam {

/// Adapter for a denoiser living in another process (for example a Python
/// Stable Diffusion script). The command template is run once per request
/// with these placeholders substituted:
///
///   {action}   info | encode | generate
///   {prompt}   prompt text (one argument)
///   {seed}     integer seed
///   {steps}    number of denoising steps
///   {out}      scratch directory the program must fill
///
/// info     writes {out}/info.json: {"id", "embedding_dim", "max_tokens", "default_timesteps"}
/// encode   writes a token file into {out} (token.json + token.f32), one row per
///          tokenizer token including start and end markers; exit status 3
///          signals an over-length prompt
/// generate writes a trace directory into {out}; the adapter records which
///          guidance branch its queries come from in notes.guidance_branch
class ExternalBackend final : public Backend {
 public:
  explicit ExternalBackend(std::string command_template, std::filesystem::path scratch = {})
      : template_(std::move(command_template)),
        scratch_(scratch.empty() ? std::filesystem::temp_directory_path() : std::move(scratch)) {
    if (template_.empty()) throw Error(ErrorKind::load, "external backend has no command configured");
  }

  std::string id() const override { return info().id; }
  std::size_t embedding_dim() const override { return info().embedding_dim; }
  std::size_t max_tokens() const override { return info().max_tokens; }
  int default_timesteps() const override { return info().default_timesteps; }

  TokenEmbeddingMatrix encode_text(const std::string& prompt) const override {
    require(text::valid_utf8(prompt), ErrorKind::argument, "prompt is not valid UTF-8");
    const auto dir = fresh_dir();
    const int rc = run("encode", prompt, 0, 0, dir);
    if (rc == 3) throw Error(ErrorKind::over_length, "prompt exceeds the backend's token limit");
    if (rc != 0) throw Error(ErrorKind::load, "external backend failed to encode (status " + std::to_string(rc) + ")");
    auto tf = load_token(dir);
    std::filesystem::remove_all(dir);
    return std::move(tf.tokens);
  }

  DenoisingTrace generate_with_trace(const std::string& prompt, std::int64_t seed, int num_timesteps,
                                     const CrossAttentionHook& hook = {}) const override {
    require(num_timesteps >= 1, ErrorKind::argument, "num_timesteps must be at least 1");
    require(!hook, ErrorKind::configuration, "the external backend cannot report synthesis-time attention");
    const auto dir = fresh_dir();
    const int rc = run("generate", prompt, seed, num_timesteps, dir);
    if (rc != 0) throw Error(ErrorKind::load, "external backend failed to generate (status " + std::to_string(rc) + ")");
    auto tr = load_trace(dir);
    std::filesystem::remove_all(dir);
    for (const BlockSpec* b : tr.cross_blocks())
      for (int t : tr.timesteps) tr.query(b->id, t);  // partial_trace error names the gap
    return tr;
  }

 private:
  struct Info {
    std::string id;
    std::size_t embedding_dim = 0;
    std::size_t max_tokens = 0;
    int default_timesteps = 30;
  };

  const Info& info() const {
    std::call_once(info_once_, [this] {
      const auto dir = fresh_dir();
      const int rc = run("info", "", 0, 0, dir);
      try {
        if (rc != 0) throw Error(ErrorKind::load, "external backend unavailable (status " + std::to_string(rc) + ")");
        const auto j = nlohmann::json::parse(read_file_text(dir / "info.json"));
        info_.id = j.at("id").get<std::string>();
        info_.embedding_dim = j.at("embedding_dim").get<std::size_t>();
        info_.max_tokens = j.at("max_tokens").get<std::size_t>();
        info_.default_timesteps = j.value("default_timesteps", 30);
      } catch (const nlohmann::json::exception& e) {
        info_error_ = std::string("external backend info is malformed: ") + e.what();
      } catch (const Error& e) {
        info_error_ = e.what();
      }
      std::filesystem::remove_all(dir);
    });
    if (info_error_) throw Error(ErrorKind::load, *info_error_);
    return info_;
  }

  std::filesystem::path fresh_dir() const {
    auto dir = scratch_ / ("ovam-ext-" + std::to_string(::getpid()) + "-" + std::to_string(counter_++));
    std::filesystem::create_directories(dir);
    return dir;
  }

  int run(const std::string& action, const std::string& prompt, std::int64_t seed, int steps,
          const std::filesystem::path& out) const {
    return run_process(expand_command(template_, {{"action", action},
                                                  {"prompt", prompt},
                                                  {"seed", std::to_string(seed)},
                                                  {"steps", std::to_string(steps)},
                                                  {"out", out.string()}}));
  }

  std::string template_;
  std::filesystem::path scratch_;
  mutable std::once_flag info_once_;
  mutable Info info_;
  mutable std::optional<std::string> info_error_;
  mutable std::atomic<std::size_t> counter_{0};
};

/// "toy" or "external" (which needs a command template).
inline std::shared_ptr<const Backend> make_backend(const std::string& id, const std::string& external_command = {}) {
  if (id == "toy") return std::make_shared<ToyBackend>();
  if (id == "external") return std::make_shared<ExternalBackend>(external_command);
  throw Error(ErrorKind::load, "unknown backend '" + id + "'");
}

}  // namespace ovam
