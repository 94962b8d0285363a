#include <gtest/gtest.h>

#include <chrono>
#include <thread>

#include "ovam/all.hpp"
#include "ovam/service.hpp"
#include "test_util.hpp"

using namespace ovam;
using nlohmann::json;

namespace {

class Running {
 public:
  explicit Running(const std::filesystem::path& data, Settings settings = {})
      : service_(std::make_shared<ToyBackend>(), data, settings) {
    port_ = service_.bind_any("127.0.0.1");
    thread_ = std::thread([this] { service_.run(); });
    while (!service_.server().is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  ~Running() {
    service_.stop();
    thread_.join();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(60, 0);
    return c;
  }

 private:
  Service service_;
  int port_ = 0;
  std::thread thread_;
};

json post(httplib::Client& c, const std::string& path, const json& body, int expect) {
  const auto r = c.Post(path, body.dump(), "application/json");
  EXPECT_TRUE(r);
  if (!r) return {};
  EXPECT_EQ(r->status, expect) << path << " " << r->body;
  return r->body.empty() ? json() : json::parse(r->body);
}

json get_json(httplib::Client& c, const std::string& path, int expect = 200) {
  const auto r = c.Get(path);
  EXPECT_TRUE(r);
  if (!r) return {};
  EXPECT_EQ(r->status, expect) << path << " " << r->body;
  return json::parse(r->body);
}

std::string get_bytes(httplib::Client& c, const std::string& path) {
  const auto r = c.Get(path);
  EXPECT_TRUE(r && r->status == 200) << path;
  return r ? r->body : "";
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

std::string new_session(httplib::Client& c, const std::string& prompt, std::int64_t seed, int steps = 3) {
  return post(c, "/sessions", {{"prompt", prompt}, {"seed", seed}, {"steps", steps}}, 201)["id"];
}

struct Sse {
  std::vector<json> data;
  std::string final_event;
  json final_data;
};

Sse read_events(httplib::Client& c, const std::string& job) {
  std::string raw;
  const auto r = c.Get("/optimizations/" + job + "/events", [&](const char* d, std::size_t n) {
    raw.append(d, n);
    return true;
  });
  EXPECT_TRUE(r);
  Sse out;
  std::string event;
  std::istringstream in(raw);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("event: ", 0) == 0) event = line.substr(7);
    else if (line.rfind("data: ", 0) == 0) {
      auto j = json::parse(line.substr(6));
      if (event.empty()) out.data.push_back(j);
      else {
        out.final_event = event;
        out.final_data = j;
      }
    }
  }
  return out;
}

json wait_job(httplib::Client& c, const std::string& job) {
  for (int i = 0; i < 6000; ++i) {
    auto j = get_json(c, "/optimizations/" + job);
    if (j["state"] != "running") return j;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ADD_FAILURE() << "job did not finish";
  return {};
}

std::string annotation_png(const DenoisingTrace& tr, std::int64_t seed) {
  const auto bytes = encode_mask_png({testutil::planted(tr, seed).gt.channels[1], ""});
  return {bytes.begin(), bytes.end()};
}

}  // namespace

TEST(HttpStatus, Mapping) {
  EXPECT_EQ(http_status(ErrorKind::argument), 422);
  EXPECT_EQ(http_status(ErrorKind::over_length), 422);
  EXPECT_EQ(http_status(ErrorKind::not_found), 404);
  EXPECT_EQ(http_status(ErrorKind::conflict), 409);
  EXPECT_EQ(http_status(ErrorKind::scorer_unavailable), 503);
  EXPECT_EQ(http_status(ErrorKind::io), 500);
}

TEST(Service, SessionsMatchLibrary) {
  testutil::TempDir tmp;
  Running svc(tmp.path());
  auto c = svc.client();
  const auto created = post(c, "/sessions", {{"prompt", "a photograph of a dog"}, {"seed", 5}, {"steps", 3}}, 201);
  const std::string id = created["id"];
  EXPECT_EQ(created["image_url"], "/sessions/" + id + "/image.png");
  const ToyBackend be;
  const auto tr = be.generate_with_trace("a photograph of a dog", 5, 3);
  EXPECT_EQ(bytes_of(get_bytes(c, created["image_url"])), png::encode_rgb(tr.image));
  const auto info = get_json(c, "/sessions/" + id);
  EXPECT_EQ(info["backend_id"], "toy");
  EXPECT_EQ(info["seed"], 5);
  EXPECT_EQ(info["has_annotation"], false);
  EXPECT_FALSE(info["created_at"].get<std::string>().empty());
  EXPECT_TRUE(load_trace(tmp / "sessions" / id / "trace") == tr);

  EXPECT_EQ(get_json(c, "/sessions/s-999999", 404)["error"], "not_found");
  EXPECT_EQ(c.Get("/sessions/s-999999/image.png")->status, 404);
  std::string long_prompt;
  for (int i = 0; i < 80; ++i) long_prompt += "w ";
  post(c, "/sessions", {{"prompt", long_prompt}}, 422);
  EXPECT_EQ(c.Post("/sessions", "{oops", "application/json")->status, 422);
}

TEST(Service, HeatmapMatchesLibrary) {
  testutil::TempDir tmp;
  Running svc(tmp.path());
  auto c = svc.client();
  const auto id = new_session(c, "a dog on grass", 2);
  const json sel = {{"timesteps", "late"}, {"pivot", 1}, {"heads", {0}}, {"normalization", "mean_over_slices"},
                    {"width", 16}, {"height", 12}};
  const auto r = post(c, "/sessions/" + id + "/heatmap",
                      {{"attribution_prompt", "dog grass"}, {"token_index", 2}, {"selection", sel}}, 200);
  const ToyBackend be;
  const auto tr = be.generate_with_trace("a dog on grass", 2, 3);
  SelectionConfig s;
  s.timesteps = TimestepStrategy::late;
  s.pivot = 1;
  s.heads = {0};
  s.normalization = HeatmapNormalization::mean_over_slices;
  s.output_w = 16;
  s.output_h = 12;
  const auto h = compute_ovam(tr, be.encode_text("dog grass"), s);
  EXPECT_EQ(bytes_of(get_bytes(c, r["raster_url"])), encode_heatmap_f32(h.maps[2]));
  EXPECT_EQ(bytes_of(get_bytes(c, r["heatmap_url"])), png::encode_rgb(colormap::render(h.maps[2])));
  EXPECT_EQ(json::parse(get_bytes(c, r["metadata_url"])), heatmap_metadata(h, 2));
  const auto st = heatmap_stats(h.maps[2], 0.4);
  EXPECT_EQ(r["stats"]["max"].get<double>(), st.max);
  EXPECT_EQ(r["stats"]["area_at_tau"].get<double>(), st.area_at_tau);
  EXPECT_EQ(r["label"], "grass");
  EXPECT_EQ(r["width"], 16);

  post(c, "/sessions/" + id + "/heatmap", {{"attribution_prompt", "dog"}, {"token_index", 5}}, 422);
  post(c, "/sessions/" + id + "/heatmap", {{"selection", sel}}, 422);
  post(c, "/sessions/" + id + "/heatmap", {{"attribution_prompt", "dog"}, {"selection", {{"blocks", {"nope"}}}}}, 422);
  post(c, "/sessions/" + id + "/heatmap", {{"token_id", "dog-000123"}}, 404);
  EXPECT_EQ(c.Get("/sessions/" + id + "/heatmaps/h99.png")->status, 404);
}

TEST(Service, MaskMatchesLibraryAndValidatesParams) {
  testutil::TempDir tmp;
  Running svc(tmp.path());
  auto c = svc.client();
  const auto id = new_session(c, "a photograph of a dog", 7);
  const ToyBackend be;
  const auto tr = be.generate_with_trace("a photograph of a dog", 7, 3);
  const auto r = post(c, "/sessions/" + id + "/mask", {{"token", "dog"}, {"tau", 0.4}, {"alpha", 0.85}, {"crf", false}}, 200);
  const auto lib = make_pseudo_mask(tr, be.encode_text("dog"), 1, BinarizationParams::natural());
  EXPECT_EQ(bytes_of(get_bytes(c, r["mask_url"])), encode_mask_png(lib));
  EXPECT_EQ(r["area_fraction"].get<double>(), lib.area_fraction());

  auto p = BinarizationParams::natural();
  p.use_crf = true;
  const auto crf = post(c, "/sessions/" + id + "/mask", {{"token", "dog"}, {"crf", true}}, 200);
  const DenseCrfRefiner refiner;
  EXPECT_EQ(bytes_of(get_bytes(c, crf["mask_url"])),
            encode_mask_png(make_pseudo_mask(tr, be.encode_text("dog"), 1, p, &refiner)));

  double last = 2.0;
  for (double tau = 0.4; tau <= 0.8001; tau += 0.05) {
    const auto m = post(c, "/sessions/" + id + "/mask", {{"token", "dog"}, {"tau", tau}}, 200);
    EXPECT_LE(m["area_fraction"].get<double>(), last);
    last = m["area_fraction"].get<double>();
  }
  for (const json& bad : {json{{"token", "dog"}, {"tau", 0.0}}, json{{"token", "dog"}, {"tau", 1.5}},
                          json{{"token", "dog"}, {"alpha", 0.0}}, json{{"token", "dog"}, {"tau", "high"}}})
    EXPECT_EQ(post(c, "/sessions/" + id + "/mask", bad, 422)["error"], "argument_error");
  post(c, "/sessions/s-424242/mask", {{"token", "dog"}}, 404);
}

TEST(Service, AnnotationRoundTrip) {
  testutil::TempDir tmp;
  Running svc(tmp.path());
  auto c = svc.client();
  const auto id = new_session(c, "a dog", 1);
  EXPECT_EQ(c.Get("/sessions/" + id + "/annotation")->status, 404);
  const auto wrong = encode_mask_png({MaskGrid(4, 4, 1), ""});
  auto r = c.Put("/sessions/" + id + "/annotation", std::string(wrong.begin(), wrong.end()), "image/png");
  EXPECT_EQ(r->status, 409);
  r = c.Put("/sessions/" + id + "/annotation", "not a png", "image/png");
  EXPECT_EQ(r->status, 422);
  MaskGrid g(8, 8, 0);
  for (std::size_t i = 0; i < 64; i += 3) g.data[i] = 1;
  const auto good = encode_mask_png({g, ""});
  r = c.Put("/sessions/" + id + "/annotation", std::string(good.begin(), good.end()), "image/png");
  EXPECT_EQ(r->status, 204);
  EXPECT_EQ(png::decode_gray(bytes_of(get_bytes(c, "/sessions/" + id + "/annotation"))).data,
            png::decode_gray(good).data);
  EXPECT_EQ(get_json(c, "/sessions/" + id)["has_annotation"], true);
}

TEST(Service, ZeroLearningRateStreamMatchesLibrary) {
  testutil::TempDir tmp;
  Running svc(tmp.path());
  auto c = svc.client();
  const auto id = new_session(c, "a photograph of a dog", 0);
  const auto tr = testutil::toy_trace(0);
  c.Put("/sessions/" + id + "/annotation", annotation_png(*tr, 0), "image/png");
  const int n = 12;
  const auto started =
      post(c, "/optimizations", {{"session_ids", {id}}, {"class", "dog"}, {"config", {{"learning_rate", 0.0}, {"epochs", n}}}}, 202);
  const auto ev = read_events(c, started["job_id"]);
  ASSERT_EQ(ev.data.size(), static_cast<std::size_t>(n));
  EXPECT_EQ(ev.final_event, "done");

  const ToyBackend be;
  OptimizerConfig cfg;
  cfg.learning_rate = 0;
  cfg.epochs = n;
  const auto lib = optimize_tokens({{tr, testutil::planted(*tr, 0).gt}}, init_attribution_tokens("dog", be), cfg);
  for (int e = 0; e < n; ++e) {
    EXPECT_EQ(ev.data[e]["epoch"], e + 1);
    EXPECT_EQ(ev.data[e]["loss"].get<double>(), ev.data[0]["loss"].get<double>());
    EXPECT_EQ(ev.data[e]["loss"].get<double>(), lib.loss_history[e]);
    EXPECT_EQ(ev.data[e]["lr"].get<double>(), 0.0);
  }
  const std::string token_id = started["token_id"];
  EXPECT_EQ(ev.final_data["token_id"], token_id);
  const auto job = get_json(c, "/optimizations/" + started["job_id"].get<std::string>());
  EXPECT_EQ(job["state"], "done");
  EXPECT_EQ(job["epochs_done"], n);
  const auto tok = get_json(c, "/tokens/" + token_id);
  EXPECT_EQ(tok["label"], "dog");
  EXPECT_EQ(tok["training"]["job_id"], started["job_id"]);
}

TEST(Service, OptimizationStreamBestLossIsStreamMinimum) {
  testutil::TempDir tmp;
  Running svc(tmp.path());
  auto c = svc.client();
  std::vector<std::string> ids;
  for (std::int64_t seed : {2, 3}) {
    ids.push_back(new_session(c, "a photograph of a dog", seed));
    c.Put("/sessions/" + ids.back() + "/annotation", annotation_png(*testutil::toy_trace(seed), seed), "image/png");
  }
  const auto started = post(c, "/optimizations", {{"session_ids", ids}, {"class", "dog"}, {"config", {{"epochs", 60}}}}, 202);
  const auto ev = read_events(c, started["job_id"]);
  ASSERT_EQ(ev.data.size(), 60u);
  double best = ev.data[0]["loss"].get<double>();
  for (const auto& d : ev.data) best = std::min(best, d["loss"].get<double>());
  EXPECT_EQ(ev.final_data["best_loss"].get<double>(), best);
  const auto tok = get_json(c, "/tokens/" + started["token_id"].get<std::string>());
  EXPECT_EQ(tok["best_loss"].get<double>(), best);

  // the stored token reproduces the library mask
  const auto tf = load_token(tmp / "tokens" / started["token_id"].get<std::string>());
  const auto r = post(c, "/sessions/" + ids[0] + "/mask", {{"token", started["token_id"]}}, 200);
  EXPECT_EQ(r["tau"], 0.8);
  EXPECT_EQ(bytes_of(get_bytes(c, r["mask_url"])),
            encode_mask_png(make_pseudo_mask(*testutil::toy_trace(2), tf.tokens, 1, BinarizationParams::optimized())));
}

TEST(Service, OptimizationErrorsAndDoubleStart) {
  testutil::TempDir tmp;
  Running svc(tmp.path());
  auto c = svc.client();
  const auto id = new_session(c, "a photograph of a dog", 4);
  post(c, "/optimizations", {{"session_ids", {id}}, {"class", "dog"}}, 422);  // no annotation
  c.Put("/sessions/" + id + "/annotation", annotation_png(*testutil::toy_trace(4), 4), "image/png");
  post(c, "/optimizations", {{"session_ids", json::array()}, {"class", "dog"}}, 422);
  post(c, "/optimizations", {{"session_ids", {id}}}, 422);
  post(c, "/optimizations", {{"session_ids", {id}}, {"class", "dog"}, {"config", {{"learning_rate", -1}}}}, 422);
  post(c, "/optimizations", {{"session_ids", {"s-777777"}}, {"class", "dog"}}, 404);
  get_json(c, "/optimizations/job-999999", 404);

  const auto long_job =
      post(c, "/optimizations", {{"session_ids", {id}}, {"class", "dog"}, {"config", {{"epochs", 100000000}}}}, 202);
  const std::string job = long_job["job_id"];
  const auto second = post(c, "/optimizations", {{"session_ids", {id}}, {"class", "dog"}}, 409);
  EXPECT_EQ(second["error"], "conflict");
  EXPECT_EQ(c.Delete("/optimizations/" + job)->status, 202);
  const auto ended = wait_job(c, job);
  EXPECT_EQ(ended["state"], "cancelled");
  EXPECT_EQ(read_events(c, job).final_event, "cancelled");
  const auto third = post(c, "/optimizations", {{"session_ids", {id}}, {"class", "dog"}, {"config", {{"epochs", 3}}}}, 202);
  EXPECT_EQ(wait_job(c, third["job_id"])["state"], "done");
}

TEST(Service, TokenCrud) {
  testutil::TempDir tmp;
  Running svc(tmp.path());
  auto c = svc.client();
  EXPECT_TRUE(get_json(c, "/tokens")["tokens"].empty());
  const auto x = testutil::random_tokens(3, 2);
  json rows = json::array();
  for (std::size_t k = 0; k < 2; ++k) {
    const auto r = x.row(k);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  const std::string id = post(c, "/tokens", {{"label", "cat"}, {"rows", rows}, {"best_loss", 0.5}}, 201)["id"];
  const auto list = get_json(c, "/tokens")["tokens"];
  ASSERT_EQ(list.size(), 1u);
  EXPECT_EQ(list[0]["id"], id);
  const auto got = get_json(c, "/tokens/" + id);
  EXPECT_EQ(got["labels"], json::array({kStartToken, "cat"}));
  EXPECT_EQ(got["best_loss"], 0.5);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t e = 0; e < 16; ++e)
      EXPECT_EQ(got["rows"][k][e].get<double>(), static_cast<double>(static_cast<float>(x.tokens(k, e))));
  EXPECT_EQ(post(c, "/tokens", {{"label", "cat"}, {"rows", {{1.0, 2.0}}}}, 422)["error"], "dimension_error");
  post(c, "/tokens", {{"rows", rows}}, 422);
  EXPECT_EQ(c.Delete("/tokens/" + id)->status, 204);
  get_json(c, "/tokens/" + id, 404);
  EXPECT_EQ(c.Delete("/tokens/" + id)->status, 404);
}

TEST(Service, StateSurvivesRestart) {
  testutil::TempDir tmp;
  std::string sid, tid;
  {
    Running svc(tmp.path());
    auto c = svc.client();
    sid = new_session(c, "a dog", 9);
    c.Put("/sessions/" + sid + "/annotation", annotation_png(*testutil::toy_trace(9, "a dog"), 9), "image/png");
    post(c, "/sessions/" + sid + "/heatmap", {{"attribution_prompt", "dog"}}, 200);
    tid = post(c, "/tokens", {{"label", "dog"}, {"rows", json::array({std::vector<double>(16, 0.25)})}}, 201)["id"];
  }
  Running svc(tmp.path());
  auto c = svc.client();
  const auto info = get_json(c, "/sessions/" + sid);
  EXPECT_EQ(info["has_annotation"], true);
  EXPECT_EQ(info["prompt"], "a dog");
  const auto h = post(c, "/sessions/" + sid + "/heatmap", {{"attribution_prompt", "dog"}}, 200);
  EXPECT_EQ(h["heatmap_url"], "/sessions/" + sid + "/heatmaps/h1.png");
  const auto sid2 = new_session(c, "a dog", 9);
  EXPECT_NE(sid2, sid);
  EXPECT_NE(sid2.substr(2), tid.substr(4));
  get_json(c, "/tokens/" + tid);
}

TEST(Service, ConcurrentSessionsAreIsolated) {
  testutil::TempDir tmp;
  Running svc(tmp.path());
  const ToyBackend be;
  std::vector<std::thread> threads;
  std::vector<std::string> failures(6);
  for (int t = 0; t < 6; ++t)
    threads.emplace_back([&, t] {
      auto c = svc.client();
      const std::string prompt = "a photograph of a " + std::string(t % 2 ? "cat" : "dog");
      const auto id = post(c, "/sessions", {{"prompt", prompt}, {"seed", t}, {"steps", 2}}, 201)["id"].get<std::string>();
      const auto tr = be.generate_with_trace(prompt, t, 2);
      for (int k = 0; k < 3; ++k) {
        const auto r = post(c, "/sessions/" + id + "/mask", {{"token", t % 2 ? "cat" : "dog"}, {"tau", 0.5 + 0.1 * k}}, 200);
        auto p = BinarizationParams::natural();
        p.tau = 0.5 + 0.1 * k;
        const auto lib = make_pseudo_mask(tr, be.encode_text(t % 2 ? "cat" : "dog"), 1, p);
        if (bytes_of(get_bytes(c, r["mask_url"])) != encode_mask_png(lib)) failures[t] = "mask mismatch";
        if (r["mask_url"] != "/sessions/" + id + "/masks/m" + std::to_string(k) + ".png") failures[t] = "numbering";
      }
    });
  for (auto& th : threads) th.join();
  for (const auto& f : failures) EXPECT_EQ(f, "");
}
