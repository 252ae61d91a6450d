// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dimlight/gradcheck.hpp"
#include "dimlight/random.hpp"

namespace dimlight::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

Tensor random_input(Shape s, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  std::vector<double> v(s.numel());
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(s, std::move(v));
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string pad_right(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }
std::string pad_left(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }

// ---- gradient-check cases ----------------------------------------------------

void add_checks(GradcheckReport& r, const std::string& module, const std::vector<GradCheckEntry>& entries,
                bool require_live = true) {
  for (const GradCheckEntry& e : entries) {
    ParamCheck c;
    c.module = module;
    c.param = e.name;
    c.probed = e.probed;
    c.max_abs_grad = e.max_abs_grad;
    c.rel_error = e.rel_error;
    c.pass = c.rel_error <= r.tol && (!require_live || c.max_abs_grad > 0.0);
    r.checks.push_back(c);
  }
}

void check_len(GradcheckReport& r) {
  const std::uint64_t s = mix_seed(r.seed, hash_name("gradcheck.len"));
  ParameterSet ps;
  const LuminanceNet len(Builder{ps, s}, "len", 4);
  const Tensor x = random_input({1, 3, 6, 6}, mix_seed(s, 1), 0.05, 0.95);
  const Tensor target = random_input({1, 1, 6, 6}, mix_seed(s, 2), 0.0, 1.0);
  const Tensor ref = random_input({1, 3, 6, 6}, mix_seed(s, 3), 0.0, 1.0);
  add_checks(r, "len", check_gradients(
                           [&] {
                             const Tensor prior = len(x);
                             return len_loss(prior, target) + mean(square(apply_luminance_prior(x, prior) - ref));
                           },
                           ps));
}

void check_g2af(GradcheckReport& r) {
  const std::uint64_t s = mix_seed(r.seed, hash_name("gradcheck.g2af"));
  ParameterSet ps;
  const G2af g(Builder{ps, s}, "g2af", 3);
  const Tensor x = random_input({1, 3, 8, 6}, mix_seed(s, 1), -1.0, 1.0);
  const Tensor target = random_input({1, 3, 8, 6}, mix_seed(s, 2), -1.0, 1.0);
  add_checks(r, "g2af", check_gradients([&] { return mean(square(g(x) - target)); }, ps));
}

UadOptions uad_options(int d_head) {
  UadOptions o;
  o.d_head = d_head;
  return o;
}

void check_uad(GradcheckReport& r) {
  const std::uint64_t s = mix_seed(r.seed, hash_name("gradcheck.uad"));
  {
    ParameterSet ps;
    const Uad uad(Builder{ps, s}, "uad", 4, uad_options(3));
    const Tensor x = random_input({1, 4, 4, 4}, mix_seed(s, 1), -1.0, 1.0);
    const Tensor target = random_input({1, 4, 4, 4}, mix_seed(s, 2), -1.0, 1.0);
    add_checks(r, "uad", check_gradients([&] { return mean(square(uad(x) - target)); }, ps, 1e-3, 24));
  }
  ParameterSet ps;
  Uad uad(Builder{ps, mix_seed(s, 3)}, "uad", 8, uad_options(4));
  const Tensor x = random_input({1, 8, 4, 4}, mix_seed(s, 4), -1.0, 1.0);
  const Tensor target = random_input({1, 8, 4, 4}, mix_seed(s, 5), -1.0, 1.0);
  for (double scale : {0.0, 0.5, 1.0, 2.0}) {
    const EntropyDiagnostic d = entropy_gradient_diagnostic(uad, ps, x, target, scale);
    EntropyScaleRow row;
    row.scale = scale;
    row.value_norm = d.value_norm_scaled;
    row.value_ratio = d.value_ratio();
    row.grad_ratio = d.ratio();
    row.pass = scale == 0.0 ? d.value_norm_scaled == 0.0 && d.value_norm_reference > 0.0
                            : std::abs(row.value_ratio - scale) <= 0.05 * scale;
    r.entropy.push_back(row);
  }
}

void check_neco(GradcheckReport& r) {
  const std::uint64_t s = mix_seed(r.seed, hash_name("gradcheck.neco"));
  ParameterSet ps;
  const Neco neco(Builder{ps, s}, "neco", 4);
  // Nonzero offsets so each direction's tau row matters.
  Tensor tau = ps.get("neco.ssm.tau");
  const Tensor t = random_input({4, 4, 1, 1}, mix_seed(s, 3), -0.3, 0.3);
  tau.assign(std::vector<double>(t.values().begin(), t.values().end()));
  const Tensor x = random_input({1, 4, 5, 4}, mix_seed(s, 1), -1.0, 1.0);
  const Tensor target = random_input({1, 4, 5, 4}, mix_seed(s, 2), -1.0, 1.0);
  add_checks(r, "neco", check_gradients([&] { return mean(square(neco(x) - target)); }, ps, 1e-3, 24));
}

void check_asc(GradcheckReport& r) {
  const std::uint64_t s = mix_seed(r.seed, hash_name("gradcheck.asc"));
  ParameterSet ps;
  const Asc asc(Builder{ps, s}, "asc", 3);
  const Tensor x = ps.add("input", random_input({1, 3, 5, 5}, mix_seed(s, 1), -1.0, 1.0));
  const Tensor target = random_input({1, 3, 5, 5}, mix_seed(s, 2), -1.0, 1.0);
  add_checks(r, "asc", check_gradients([&] { return mean(square(asc(x) - target)); }, ps, 1e-3, 24));
}

void check_losses(GradcheckReport& r) {
  const std::uint64_t s = mix_seed(r.seed, hash_name("gradcheck.losses"));
  ParameterSet ps;
  const Tensor pred = ps.add("pred", random_input({1, 3, 16, 16}, mix_seed(s, 1), 0.1, 0.9));
  const Tensor prior = ps.add("prior", random_input({1, 1, 16, 16}, mix_seed(s, 2), 0.1, 0.9));
  const Tensor gt = random_input({1, 3, 16, 16}, mix_seed(s, 3), 0.0, 1.0);
  const Tensor target = random_input({1, 1, 16, 16}, mix_seed(s, 4), 0.0, 1.0);
  const Objective obj;
  for (std::size_t i = 0; i < kLossTermNames.size(); ++i) {
    // Each term only depends on one of the two inputs.
    ParameterSet only;
    const bool is_len = std::string(kLossTermNames[i]) == "len";
    only.add(is_len ? "prior" : "pred", is_len ? prior : pred);
    const Tensor& p = only.entries()[0].second;
    auto entries = check_gradients(
        [&] { return is_len ? obj(pred, gt, p, target).terms[i] : obj(p, gt, prior, target).terms[i]; }, only,
        1e-3, 96);
    for (auto& e : entries) e.name = std::string(kLossTermNames[i]) + "/" + e.name;
    add_checks(r, "losses", entries);
  }
  auto total = check_gradients([&] { return obj(pred, gt, prior, target).total; }, ps, 1e-3, 96);
  for (auto& e : total) e.name = "total/" + e.name;
  add_checks(r, "losses", total);
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names = {"len", "g2af", "uad", "neco", "asc", "losses"};
  return names;
}

GradcheckReport run_gradcheck(const std::string& module, std::uint64_t seed, double tol) {
  GradcheckReport r;
  r.seed = seed;
  r.tol = tol;
  const auto& names = gradcheck_modules();
  if (module != "all" && std::find(names.begin(), names.end(), module) == names.end()) {
    throw ConfigError("unknown gradcheck module '" + module + "'");
  }
  auto want = [&](const char* m) { return module == "all" || module == m; };
  if (want("len")) check_len(r);
  if (want("g2af")) check_g2af(r);
  if (want("uad")) check_uad(r);
  if (want("neco")) check_neco(r);
  if (want("asc")) check_asc(r);
  if (want("losses")) check_losses(r);
  return r;
}

bool GradcheckReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const ParamCheck& c) { return c.pass; }) &&
         std::all_of(entropy.begin(), entropy.end(), [](const EntropyScaleRow& e) { return e.pass; });
}

std::string GradcheckReport::json() const {
  Json j;
  j["seed"] = seed;
  j["tol"] = tol;
  Json modules = Json::array();
  for (const ParamCheck& c : checks) {
    if (modules.empty() || modules.back()["module"] != c.module) {
      modules.push_back(Json{{"module", c.module}, {"checks", Json::array()}});
    }
    modules.back()["checks"].push_back(Json{{"param", c.param},
                                            {"probed", c.probed},
                                            {"max_abs_grad", c.max_abs_grad},
                                            {"rel_error", c.rel_error},
                                            {"pass", c.pass}});
  }
  j["modules"] = modules;
  if (!entropy.empty()) {
    Json rows = Json::array();
    for (const EntropyScaleRow& e : entropy) {
      rows.push_back(Json{{"scale", e.scale},
                          {"value_norm", e.value_norm},
                          {"value_ratio", e.value_ratio},
                          {"grad_ratio", e.grad_ratio},
                          {"pass", e.pass}});
    }
    j["entropy_diagnostic"] = rows;
  }
  j["passed"] = passed();
  return j.dump(2);
}

std::string GradcheckReport::table() const {
  std::size_t wp = 9;
  for (const ParamCheck& c : checks) wp = std::max(wp, c.param.size());
  std::ostringstream s;
  s << pad_right("module", 8) << pad_right("parameter", wp + 2) << pad_left("probed", 6) << pad_left("max|g|", 12)
    << pad_left("rel err", 12) << "  status\n";
  for (const ParamCheck& c : checks) {
    s << pad_right(c.module, 8) << pad_right(c.param, wp + 2) << pad_left(std::to_string(c.probed), 6)
      << pad_left(fmt("%.3e", c.max_abs_grad), 12) << pad_left(fmt("%.3e", c.rel_error), 12) << "  "
      << (c.pass ? "ok" : "FAIL") << '\n';
  }
  if (!entropy.empty()) {
    s << "\nentropy scale  value-path norm  value ratio  all-param ratio  status\n";
    for (const EntropyScaleRow& e : entropy) {
      s << pad_left(fmt("%.2f", e.scale), 13) << pad_left(fmt("%.4e", e.value_norm), 17)
        << pad_left(fmt("%.4f", e.value_ratio), 13) << pad_left(fmt("%.4f", e.grad_ratio), 17) << "  "
        << (e.pass ? "ok" : "FAIL") << '\n';
    }
  }
  s << "tol " << fmt("%g", tol) << ": " << (passed() ? "passed" : "FAILED") << '\n';
  return s.str();
}

// ---- ablations ---------------------------------------------------------------

const std::vector<std::string>& ablation_row_names() {
  static const std::vector<std::string> names = {"baseline", "len", "neco", "uad", "asc", "full"};
  return names;
}

ModelConfig ablation_config(const ModelConfig& base, const std::string& row) {
  ModelConfig c = base;
  const bool full = row == "full";
  if (!full && row != "baseline" && row != "len" && row != "neco" && row != "uad" && row != "asc") {
    throw ConfigError("unknown ablation row '" + row + "'");
  }
  c.use_len = full || row == "len";
  c.use_neco = full || row == "neco";
  c.use_uad = full || row == "uad";
  c.use_asc = full || row == "asc";
  return c;
}

std::pair<std::vector<ImagePair>, std::vector<ImagePair>> split_holdout(const std::vector<ImagePair>& pairs,
                                                                        int holdout) {
  if (holdout < 0) throw ConfigError("holdout must be >= 0");
  if (holdout == 0) return {pairs, pairs};
  if (static_cast<std::size_t>(holdout) >= pairs.size()) {
    throw ConfigError("holdout " + std::to_string(holdout) + " leaves no training pairs out of " +
                      std::to_string(pairs.size()));
  }
  const auto cut = pairs.end() - holdout;
  return {std::vector<ImagePair>(pairs.begin(), cut), std::vector<ImagePair>(cut, pairs.end())};
}

std::vector<AblationRow> run_ablation(const RunConfig& config, const std::vector<ImagePair>& train_set,
                                      const std::vector<ImagePair>& eval_set,
                                      const std::vector<std::string>& rows, int jobs) {
  for (const std::string& r : rows) (void)ablation_config(config.model, r);
  auto one = [&](const std::string& name) {
    AblationRow row;
    row.name = name;
    row.model = ablation_config(config.model, name);
    Model model(row.model);
    row.params = model.param_count();
    row.initial = evaluate(model, eval_set, config.loss);
    TrainOptions opts = config.train;
    opts.objective = config.loss;
    const auto history = train(model, train_set, opts);
    row.last_train_loss = history.empty() ? row.initial.loss.total : history.back().loss.total;
    row.final = evaluate(model, eval_set, config.loss);
    return row;
  };
  std::vector<AblationRow> out;
  const std::size_t width = static_cast<std::size_t>(std::max(jobs, 1));
  for (std::size_t start = 0; start < rows.size(); start += width) {
    std::vector<std::future<AblationRow>> batch;
    for (std::size_t i = start; i < std::min(rows.size(), start + width); ++i) {
      batch.push_back(std::async(width == 1 ? std::launch::deferred : std::launch::async, one, rows[i]));
    }
    for (auto& f : batch) out.push_back(f.get());
  }
  return out;
}

namespace {

Json eval_json(const EvalSummary& e) {
  Json terms = Json::object();
  for (std::size_t i = 0; i < kLossTermNames.size(); ++i) terms[kLossTermNames[i]] = e.loss.terms[i];
  return Json{{"loss", e.loss.total}, {"terms", terms}, {"psnr", e.psnr}, {"ssim", e.ssim}, {"input_psnr", e.input_psnr}};
}

Json step_json(const StepRecord& r) {
  Json j{{"step", r.step}, {"lr", r.lr}, {"sample", r.sample}};
  for (std::size_t i = 0; i < kLossTermNames.size(); ++i) j[kLossTermNames[i]] = r.loss.terms[i];
  j["total"] = r.loss.total;
  return j;
}

}  // namespace

std::string ablation_json(const RunConfig& config, const std::vector<AblationRow>& rows) {
  Json j;
  j["steps"] = config.train.steps;
  j["seed"] = config.train.seed;
  Json arr = Json::array();
  for (const AblationRow& r : rows) {
    arr.push_back(Json{{"row", r.name},
                       {"use_len", r.model.use_len},
                       {"use_neco", r.model.use_neco},
                       {"use_uad", r.model.use_uad},
                       {"use_asc", r.model.use_asc},
                       {"params", r.params},
                       {"initial_loss", r.initial.loss.total},
                       {"final_loss", r.final.loss.total},
                       {"last_train_loss", r.last_train_loss},
                       {"psnr", r.final.psnr},
                       {"ssim", r.final.ssim},
                       {"input_psnr", r.final.input_psnr}});
  }
  j["rows"] = arr;
  return j.dump(2);
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  s << pad_right("row", 10) << " LEN NeCo UaD AsC" << pad_left("params", 9) << pad_left("init loss", 11)
    << pad_left("final loss", 12) << pad_left("PSNR", 9) << pad_left("SSIM", 8) << '\n';
  auto mark = [](bool on) { return on ? std::string("x") : std::string("-"); };
  for (const AblationRow& r : rows) {
    s << pad_right(r.name, 10) << pad_left(mark(r.model.use_len), 4) << pad_left(mark(r.model.use_neco), 5)
      << pad_left(mark(r.model.use_uad), 4) << pad_left(mark(r.model.use_asc), 4)
      << pad_left(std::to_string(r.params), 9) << pad_left(fmt("%.5f", r.initial.loss.total), 11)
      << pad_left(fmt("%.5f", r.final.loss.total), 12) << pad_left(fmt("%.3f", r.final.psnr), 9)
      << pad_left(fmt("%.4f", r.final.ssim), 8) << '\n';
  }
  return s.str();
}

// ---- subcommands -------------------------------------------------------------

namespace {

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

struct EnhanceArgs {
  std::string input, checkpoint, output, entropy_out, config;
};

int cmd_enhance(const EnhanceArgs& a, Streams io) {
  std::unique_ptr<Model> model;
  if (a.config.empty()) {
    model = load_checkpoint(a.checkpoint);
  } else {
    model = load_checkpoint(a.checkpoint, load_run_config(a.config).model);
  }
  const Image img = load_image(a.input);
  const ModelOutput out = enhance(*model, to_tensor(img));
  save_image(to_image(out.image), a.output);
  Json j{{"output", a.output}, {"width", img.width}, {"height", img.height}};
  if (!a.entropy_out.empty()) {
    if (!out.entropy.defined()) throw ConfigError("--entropy-out needs a model with UaD enabled");
    save_image(gray_heatmap(out.entropy), a.entropy_out);
    j["entropy_out"] = a.entropy_out;
    j["entropy_width"] = out.entropy.shape().w;
    j["entropy_height"] = out.entropy.shape().h;
  }
  io.out << j.dump(2) << '\n';
  return kExitOk;
}

struct SynthArgs {
  std::string input_dir, output_dir;
  std::optional<double> gamma, scale, sigma;
  std::uint64_t seed = 0;
  int scenes = 0;
  int size = 32;
};

int cmd_synth(const SynthArgs& a, Streams io) {
  if (a.input_dir.empty() == (a.scenes == 0)) {
    throw ConfigError("synth needs exactly one of --input-dir or --scenes");
  }
  if (a.scenes < 0) throw ConfigError("--scenes must be >= 0");
  std::vector<std::pair<std::string, Image>> sources;
  if (!a.input_dir.empty()) {
    if (!fs::is_directory(a.input_dir)) throw IoError("not a directory: " + a.input_dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.input_dir)) {
      const std::string ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".png" || ext == ".ppm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) sources.emplace_back(f.stem().string(), load_image(f));
  } else {
    for (int i = 0; i < a.scenes; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "scene_%03d", i);
      sources.emplace_back(name, make_scene(a.size, a.size, mix_seed(a.seed, static_cast<std::uint64_t>(i))));
    }
  }
  const bool fixed = a.gamma || a.scale || a.sigma;
  LowLightParams fixed_params;
  if (a.gamma) fixed_params.gamma = *a.gamma;
  if (a.scale) fixed_params.scale = *a.scale;
  if (a.sigma) fixed_params.noise_sigma = *a.sigma;

  const fs::path out_dir(a.output_dir);
  std::error_code ec;
  fs::create_directories(out_dir / "low", ec);
  fs::create_directories(out_dir / "high", ec);
  if (!fs::is_directory(out_dir / "low") || !fs::is_directory(out_dir / "high")) {
    throw IoError("cannot create output directories under " + a.output_dir);
  }
  Json manifest = Json::array();
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& [name, high] = sources[i];
    const std::uint64_t s = mix_seed(a.seed, hash_name(name));
    const LowLightParams p = fixed ? fixed_params : sample_lowlight_params(s);
    const Image low = synth_lowlight(high, p, mix_seed(s, 1));
    const std::string low_rel = "low/" + name + ".png";
    const std::string high_rel = "high/" + name + ".png";
    save_image(low, out_dir / low_rel);
    save_image(high, out_dir / high_rel);
    manifest.push_back(Json{{"low", low_rel}, {"high", high_rel}});
  }
  const fs::path manifest_path = out_dir / "manifest.json";
  write_text(manifest_path, manifest.dump(2) + "\n");
  io.out << Json{{"pairs", sources.size()}, {"manifest", manifest_path.string()}}.dump(2) << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string config, manifest, out, history;
  std::optional<long> steps;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, Streams io) {
  RunConfig cfg = config_or_default(a.config);
  if (a.steps) cfg.train.steps = *a.steps;
  if (a.seed) cfg.train.seed = *a.seed;
  if (cfg.train.steps < 0) throw ConfigError("--steps must be >= 0");
  const std::string manifest = a.manifest.empty() ? cfg.paths.manifest : a.manifest;
  const std::string out = a.out.empty() ? cfg.paths.checkpoint : a.out;
  const std::string history_path = a.history.empty() ? cfg.paths.history : a.history;
  if (manifest.empty()) throw ConfigError("train needs --data-manifest (or paths.manifest)");
  if (out.empty()) throw ConfigError("train needs --out (or paths.checkpoint)");

  const auto pairs = load_pairs(load_manifest(manifest));
  if (pairs.empty()) throw ConfigError("manifest " + manifest + " lists no pairs");
  const auto [train_set, eval_set] = split_holdout(pairs, cfg.holdout);

  Model model(cfg.model);
  const EvalSummary initial = evaluate(model, eval_set, cfg.loss);
  std::ofstream history;
  if (!history_path.empty()) {
    history.open(history_path, std::ios::binary | std::ios::trunc);
    if (!history) throw IoError("cannot write " + history_path);
  }
  TrainOptions opts = cfg.train;
  opts.objective = cfg.loss;
  try {
    (void)train(model, train_set, opts, [&](const StepRecord& r) {
      if (history.is_open()) history << step_json(r).dump() << '\n' << std::flush;
    });
  } catch (const DivergenceError& e) {
    io.err << "error: " << e.what() << '\n';
    return kExitDivergence;
  }
  save_checkpoint(model, out);
  const EvalSummary final = evaluate(model, eval_set, cfg.loss);
  const Json summary{{"steps", cfg.train.steps},
                     {"seed", cfg.train.seed},
                     {"params", model.param_count()},
                     {"train_pairs", train_set.size()},
                     {"eval_pairs", eval_set.size()},
                     {"eval_set", cfg.holdout > 0 ? "holdout" : "train"},
                     {"initial", eval_json(initial)},
                     {"final", eval_json(final)},
                     {"checkpoint", out}};
  io.out << summary.dump(2) << '\n';
  return kExitOk;
}

struct GradcheckArgs {
  std::string module = "all";
  std::uint64_t seed = 0;
  double tol = 1e-3;
  std::string format = "json";
};

int cmd_gradcheck(const GradcheckArgs& a, Streams io) {
  if (!(a.tol >= 0.0)) throw ConfigError("--tol must be >= 0");
  const GradcheckReport r = run_gradcheck(a.module, a.seed, a.tol);
  io.out << (a.format == "text" ? r.table() : r.json() + "\n");
  if (r.passed()) return kExitOk;
  for (const ParamCheck& c : r.checks) {
    if (!c.pass) {
      io.err << "gradcheck failed: " << c.module << " " << c.param << " rel_error " << fmt("%.3e", c.rel_error)
             << (c.max_abs_grad == 0.0 ? " (zero gradient)" : "") << " tol " << fmt("%g", a.tol) << '\n';
    }
  }
  for (const EntropyScaleRow& e : r.entropy) {
    if (!e.pass) io.err << "gradcheck failed: uad entropy scale " << e.scale << " value ratio " << e.value_ratio << '\n';
  }
  return kExitGradcheck;
}

struct AblateArgs {
  std::string config, manifest, rows = "baseline,len,neco,uad,asc,full", format = "text", json_out;
  std::optional<long> steps;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
};

std::vector<std::string> split_rows(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    if (item.empty()) throw ConfigError("empty ablation row in '" + text + "'");
    const auto& names = ablation_row_names();
    if (std::find(names.begin(), names.end(), item) == names.end()) {
      throw ConfigError("unknown ablation row '" + item + "'");
    }
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError("--rows is empty");
  return out;
}

int cmd_ablate(const AblateArgs& a, Streams io) {
  const std::vector<std::string> rows = split_rows(a.rows);
  RunConfig cfg = config_or_default(a.config);
  if (a.steps) cfg.train.steps = *a.steps;
  if (a.seed) cfg.train.seed = *a.seed;
  if (cfg.train.steps < 0) throw ConfigError("--steps must be >= 0");
  if (a.jobs < 1) throw ConfigError("--jobs must be >= 1");
  const std::string manifest = a.manifest.empty() ? cfg.paths.manifest : a.manifest;
  if (manifest.empty()) throw ConfigError("ablate needs --data-manifest (or paths.manifest)");
  const auto pairs = load_pairs(load_manifest(manifest));
  if (pairs.empty()) throw ConfigError("manifest " + manifest + " lists no pairs");
  const auto [train_set, eval_set] = split_holdout(pairs, cfg.holdout);
  std::vector<AblationRow> result;
  try {
    result = run_ablation(cfg, train_set, eval_set, rows, a.jobs);
  } catch (const DivergenceError& e) {
    io.err << "error: " << e.what() << '\n';
    return kExitDivergence;
  }
  const std::string json = ablation_json(cfg, result);
  if (!a.json_out.empty()) write_text(a.json_out, json + "\n");
  io.out << (a.format == "json" ? json + "\n" : ablation_table(result));
  return kExitOk;
}

struct MetricsArgs {
  std::string pred, gt;
};

int cmd_metrics(const MetricsArgs& a, Streams io) {
  const Image pred = load_image(a.pred);
  const Image gt = load_image(a.gt);
  if (pred.width != gt.width || pred.height != gt.height) {
    throw ImageError("size mismatch: " + std::to_string(pred.width) + "x" + std::to_string(pred.height) + " vs " +
                     std::to_string(gt.width) + "x" + std::to_string(gt.height));
  }
  if (pred.width < kSsimWindow || pred.height < kSsimWindow) {
    throw ImageError("images must be at least 11x11 for SSIM");
  }
  const Tensor p = to_tensor(pred);
  const Tensor g = to_tensor(gt);
  io.out << Json{{"psnr", psnr(p, g)}, {"ssim", ssim_metric(p, g)}}.dump(2) << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-light image enhancement: inference, synthesis, training and diagnostics", "dimlight"};
  app.require_subcommand(0, 1);
  bool print_config = false;
  std::string top_config;
  app.add_flag("--print-config", print_config, "Print the RunConfig JSON (defaults, or --config merged) and exit");
  app.add_option("--config", top_config, "RunConfig JSON used with --print-config");
  app.set_version_flag("--version", "dimlight 0.1.0");

  EnhanceArgs ea;
  auto* enhance_cmd = app.add_subcommand("enhance", "Enhance one image with a trained checkpoint");
  enhance_cmd->add_option("--input", ea.input, "Input PNG/PPM")->required();
  enhance_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  enhance_cmd->add_option("--output", ea.output, "Output PNG/PPM")->required();
  enhance_cmd->add_option("--entropy-out", ea.entropy_out, "Bottleneck entropy heatmap (gray PNG, [0,1] -> [0,255])");
  enhance_cmd->add_option("--config", ea.config, "RunConfig whose model must match the checkpoint");

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Darken well-exposed images into low/high training pairs");
  synth_cmd->add_option("--input-dir", sa.input_dir, "Directory of well-exposed PNG/PPM images");
  synth_cmd->add_option("--scenes", sa.scenes, "Generate this many procedural scenes instead of --input-dir");
  synth_cmd->add_option("--size", sa.size, "Procedural scene size in pixels")->check(CLI::Range(1, 4096));
  synth_cmd->add_option("--output-dir", sa.output_dir, "Output directory (low/, high/, manifest.json)")->required();
  synth_cmd->add_option("--gamma", sa.gamma, "Fixed gamma (default: sampled per image)");
  synth_cmd->add_option("--scale", sa.scale, "Fixed brightness scale (default: sampled per image)");
  synth_cmd->add_option("--sigma", sa.sigma, "Fixed noise sigma (default: sampled per image)");
  synth_cmd->add_option("--seed", sa.seed, "Seed");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest of pairs");
  train_cmd->add_option("--config", ta.config, "RunConfig JSON");
  train_cmd->add_option("--data-manifest", ta.manifest, "Manifest JSON of {low, high} pairs");
  train_cmd->add_option("--out", ta.out, "Checkpoint to write");
  train_cmd->add_option("--history", ta.history, "Per-step loss history (JSONL)");
  train_cmd->add_option("--steps", ta.steps, "Override train.steps");
  train_cmd->add_option("--seed", ta.seed, "Override train.seed");

  GradcheckArgs ga;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  grad_cmd->add_option("--module", ga.module, "len|g2af|uad|neco|asc|losses|all")
      ->check(CLI::IsMember({"len", "g2af", "uad", "neco", "asc", "losses", "all"}));
  grad_cmd->add_option("--seed", ga.seed, "Seed for parameters and inputs");
  grad_cmd->add_option("--tol", ga.tol, "Maximum relative error");
  grad_cmd->add_option("--format", ga.format, "json|text")->check(CLI::IsMember({"json", "text"}));

  AblateArgs aa;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train one model per module-ablation row and compare");
  ablate_cmd->add_option("--config", aa.config, "RunConfig JSON");
  ablate_cmd->add_option("--data-manifest", aa.manifest, "Manifest JSON of {low, high} pairs");
  ablate_cmd->add_option("--rows", aa.rows, "Comma-separated rows from baseline,len,neco,uad,asc,full");
  ablate_cmd->add_option("--steps", aa.steps, "Override train.steps");
  ablate_cmd->add_option("--seed", aa.seed, "Override train.seed");
  ablate_cmd->add_option("--jobs", aa.jobs, "Rows trained concurrently");
  ablate_cmd->add_option("--format", aa.format, "text|json")->check(CLI::IsMember({"json", "text"}));
  ablate_cmd->add_option("--json", aa.json_out, "Also write the JSON report here");

  MetricsArgs ma;
  auto* metrics_cmd = app.add_subcommand("metrics", "PSNR and SSIM of a prediction against ground truth");
  metrics_cmd->add_option("--pred", ma.pred, "Predicted image")->required();
  metrics_cmd->add_option("--gt", ma.gt, "Ground-truth image")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitBadArgument;
  }

  const Streams io{out, err};
  try {
    if (print_config) {
      out << run_config_to_json(config_or_default(top_config)) << '\n';
      return kExitOk;
    }
    if (enhance_cmd->parsed()) return cmd_enhance(ea, io);
    if (synth_cmd->parsed()) return cmd_synth(sa, io);
    if (train_cmd->parsed()) return cmd_train(ta, io);
    if (grad_cmd->parsed()) return cmd_gradcheck(ga, io);
    if (ablate_cmd->parsed()) return cmd_ablate(aa, io);
    if (metrics_cmd->parsed()) return cmd_metrics(ma, io);
    out << app.help();
    return kExitOk;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ImageError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadArgument;
  } catch (const NumericsError& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadArgument;
  }
}

}  // namespace dimlight::cli
