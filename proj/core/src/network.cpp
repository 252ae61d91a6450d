// SPDX-License-Identifier: Apache-2.0

#include "dimlight/network.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "dimlight/random.hpp"

namespace dimlight {

using Json = nlohmann::ordered_json;

// ---- config ------------------------------------------------------------------

ModelConfig ModelConfig::reference() { return ModelConfig{}; }

ModelConfig ModelConfig::toy_preset() {
  ModelConfig c;
  c.len_channels = 8;
  c.base_channels = 8;
  c.depth = 2;
  c.multipliers = {1, 2};
  c.d_head = 8;
  c.toy = true;
  return c;
}

int ModelConfig::level_channels(int i) const {
  if (i < 0 || i >= depth || static_cast<std::size_t>(i) >= multipliers.size()) {
    throw std::out_of_range("level index " + std::to_string(i));
  }
  return base_channels * multipliers[static_cast<std::size_t>(i)];
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("model config: " + field + " " + why);
  };
  if (depth < 1) fail("depth", "must be >= 1");
  if (depth > 6) fail("depth", "must be <= 6");
  if (static_cast<int>(multipliers.size()) != depth) fail("multipliers", "must have one entry per level");
  for (int m : multipliers)
    if (m < 1) fail("multipliers", "entries must be >= 1");
  if (len_channels < 1) fail("len_channels", "must be >= 1");
  if (base_channels < 2) fail("base_channels", "must be >= 2");
  if (d_head < 1) fail("d_head", "must be >= 1");
  if (asc_patch < 1 || asc_patch % 2 == 0) fail("asc_patch", "must be odd");
  if (asc_k < 1 || asc_k >= asc_patch * asc_patch) fail("asc_k", "must satisfy 1 <= k < patch^2");
  if (!(uad_dropout >= 0.0 && uad_dropout < 1.0)) fail("uad_dropout", "must be in [0,1)");
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return len_channels == o.len_channels && base_channels == o.base_channels && depth == o.depth &&
         multipliers == o.multipliers && d_head == o.d_head && asc_k == o.asc_k && asc_patch == o.asc_patch &&
         ssm_steady_start == o.ssm_steady_start && use_len == o.use_len && use_neco == o.use_neco &&
         use_uad == o.use_uad && use_asc == o.use_asc;
}

namespace {

Json config_json(const ModelConfig& c) {
  Json j;
  j["len_channels"] = c.len_channels;
  j["base_channels"] = c.base_channels;
  j["depth"] = c.depth;
  j["multipliers"] = c.multipliers;
  j["d_head"] = c.d_head;
  j["asc_k"] = c.asc_k;
  j["asc_patch"] = c.asc_patch;
  j["uad_dropout"] = c.uad_dropout;
  j["ssm_steady_start"] = c.ssm_steady_start;
  j["toy"] = c.toy;
  j["seed"] = c.seed;
  j["use_len"] = c.use_len;
  j["use_neco"] = c.use_neco;
  j["use_uad"] = c.use_uad;
  j["use_asc"] = c.use_asc;
  return j;
}

ModelConfig config_from(const Json& j) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  const Json defaults = config_json(ModelConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw std::invalid_argument("model config: unknown key '" + key + "'");
  }
  ModelConfig c;
  auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("model config: bad value for '") + key + "'");
    }
  };
  read("len_channels", c.len_channels);
  read("base_channels", c.base_channels);
  read("depth", c.depth);
  read("multipliers", c.multipliers);
  read("d_head", c.d_head);
  read("asc_k", c.asc_k);
  read("asc_patch", c.asc_patch);
  read("uad_dropout", c.uad_dropout);
  read("ssm_steady_start", c.ssm_steady_start);
  read("toy", c.toy);
  read("seed", c.seed);
  read("use_len", c.use_len);
  read("use_neco", c.use_neco);
  read("use_uad", c.use_uad);
  read("use_asc", c.use_asc);
  // A depth change without multipliers keeps the doubling schedule.
  if (j.contains("depth") && !j.contains("multipliers")) {
    c.multipliers.clear();
    for (int i = 0; i < c.depth && i < 16; ++i) c.multipliers.push_back(1 << i);
  }
  c.validate();
  return c;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& c) { return config_json(c).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
  return config_from(j);
}

// ---- model -------------------------------------------------------------------

struct Model::Level {
  std::optional<Neco> neco;
  std::optional<ResBlock> enc_rem;
  Conv2d down;
  Conv2d up;
  Linear skip;
  std::optional<Asc> asc;
  std::optional<ResBlock> dec_rem;
};

Model::~Model() = default;

Model::Model(const ModelConfig& config) : config_(config), params_(std::make_unique<ParameterSet>()) {
  config_.validate();
  const Builder b{*params_, config_.seed};
  const int depth = config_.depth;
  if (config_.use_len) len_.emplace(b, "len", config_.len_channels);
  stem_ = Conv2d(b, "stem", 3, config_.level_channels(0), 3);
  for (int i = 0; i < depth; ++i) {
    const std::string at = std::to_string(i);
    const int c = config_.level_channels(i);
    const int below = i + 1 < depth ? config_.level_channels(i + 1) : config_.bottleneck_channels();
    auto lv = std::make_unique<Level>();
    if (config_.use_neco) {
      lv->neco.emplace(b, "enc" + at + ".neco", c, config_.ssm_steady_start);
    } else {
      lv->enc_rem.emplace(b, "enc" + at + ".rem", c);
    }
    lv->down = Conv2d(b, "down" + at, c, below, 3, 2);
    lv->up = Conv2d(b, "up" + at, below, c, 3);
    lv->skip = Linear(b, "skip" + at, 2 * c, c);
    if (config_.use_asc) {
      lv->asc.emplace(b, "dec" + at + ".asc", c, config_.asc_k, config_.asc_patch);
    } else {
      lv->dec_rem.emplace(b, "dec" + at + ".rem", c);
    }
    levels_.push_back(std::move(lv));
  }
  const int cb = config_.bottleneck_channels();
  if (config_.use_uad) {
    UadOptions uo;
    uo.d_head = config_.d_head;
    uo.dropout = config_.uad_dropout;
    uad_.emplace(b, "bottleneck.uad", cb, uo);
  } else {
    bottleneck_rem_.emplace(b, "bottleneck.rem", cb);
  }
  head_ = Conv2d(b, "head", config_.level_channels(0), 3, 3);
}

ModelOutput Model::run(const Tensor& i_low, const RunMode& mode) const {
  const Shape s = i_low.shape();
  if (s.c != 3) throw DimensionError("model input must have 3 channels, got " + s.str());
  const int m = config_.size_multiple();
  if (s.h % m != 0 || s.w % m != 0) {
    const int ph = (m - s.h % m) % m;
    const int pw = (m - s.w % m) % m;
    throw DimensionError("input " + std::to_string(s.h) + "x" + std::to_string(s.w) + " is not a multiple of " +
                         std::to_string(m) + "; pad by " + std::to_string(ph) + " rows and " + std::to_string(pw) +
                         " columns");
  }
  ModelOutput out;
  Tensor lit = i_low;
  if (len_) {
    out.prior = (*len_)(i_low);
    lit = staged("len.apply", [&] { return apply_luminance_prior(i_low, out.prior); });
  }
  Tensor x = staged("stem", [&] { return stem_(lit); });
  std::vector<Tensor> skips;
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    const Level& lv = *levels_[i];
    x = staged("encoder " + std::to_string(i), [&] { return lv.neco ? x + (*lv.neco)(x) : (*lv.enc_rem)(x); });
    skips.push_back(x);
    x = staged("down " + std::to_string(i), [&] { return lv.down(x); });
  }
  if (uad_) {
    Uad::Trace trace;
    x = (*uad_)(x, mode, &trace);
    out.entropy = trace.entropy;
  } else {
    x = staged("bottleneck", [&] { return (*bottleneck_rem_)(x); });
  }
  for (std::size_t k = levels_.size(); k-- > 0;) {
    const Level& lv = *levels_[k];
    x = staged("decoder " + std::to_string(k), [&] {
      const Tensor up = lv.up(upsample_nearest2x(x));
      const Tensor fused = lv.skip(concat({up, skips[k]}, 1));
      return lv.asc ? (*lv.asc)(fused) : (*lv.dec_rem)(fused);
    });
  }
  out.image = staged("head", [&] { return clamp(lit + head_(x), 0.0, 1.0); });
  return out;
}

namespace {

int reflect_at(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

}  // namespace

Tensor pad_to_multiple(const Tensor& x, int multiple) {
  if (multiple < 1) throw std::invalid_argument("pad multiple must be >= 1");
  const Shape s = x.shape();
  const int h = (s.h + multiple - 1) / multiple * multiple;
  const int w = (s.w + multiple - 1) / multiple * multiple;
  if (h == s.h && w == s.w) return x;
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(s.n) * s.c * h * w);
  auto xv = x.values();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int z = 0; z < w; ++z) {
          const std::size_t src =
              ((static_cast<std::size_t>(n) * s.c + c) * s.h + reflect_at(y, s.h)) * s.w + reflect_at(z, s.w);
          v.push_back(xv[src]);
        }
  return Tensor::from({s.n, s.c, h, w}, std::move(v));
}

Tensor crop_to(const Tensor& x, int h, int w) {
  const Shape s = x.shape();
  if (h > s.h || w > s.w) throw DimensionError("crop_to larger than input " + s.str());
  if (h == s.h && w == s.w) return x;
  return narrow(narrow(x, 2, 0, h), 3, 0, w);
}

ModelOutput enhance(const Model& model, const Tensor& i_low) {
  NoGradGuard no_grad;
  const Shape s = i_low.shape();
  ModelOutput out = model.run(pad_to_multiple(i_low, model.config().size_multiple()));
  out.image = crop_to(out.image, s.h, s.w);
  if (out.prior.defined()) out.prior = crop_to(out.prior, s.h, s.w);
  return out;
}

// ---- checkpoints -------------------------------------------------------------

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  return v;
}

constexpr std::size_t kPreamble = 4 + 1 + 4;

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  Json header;
  header["config"] = config_json(model.config());
  Json manifest = Json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : model.params().entries()) {
    const Shape s = t.shape();
    manifest.push_back(Json{{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
    offset += t.numel();
  }
  header["params"] = manifest;
  header["payload_floats"] = offset;
  const std::string text = header.dump();

  std::string buf(kCheckpointMagic, 4);
  buf.push_back(static_cast<char>(kCheckpointVersion));
  put_u32(buf, static_cast<std::uint32_t>(text.size()));
  buf += text;
  buf.reserve(buf.size() + 4 * offset);
  for (const auto& [name, t] : model.params().entries())
    for (double v : t.values()) put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw CheckpointError("write failed: " + path.string());
}

namespace {

std::unique_ptr<Model> load_impl(const std::filesystem::path& path, const ModelConfig* expect) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < kPreamble || buf.compare(0, 4, kCheckpointMagic, 4) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = static_cast<std::uint8_t>(buf[4]);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::size_t hlen = get_u32(buf, 5);
  if (buf.size() < kPreamble + hlen) throw CheckpointError("checkpoint header truncated");
  Json header;
  try {
    header = Json::parse(buf.substr(kPreamble, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.contains("config") || !header.contains("params") || !header.contains("payload_floats")) {
    throw CheckpointError("checkpoint header is missing fields");
  }
  ModelConfig stored;
  try {
    stored = config_from(header["config"]);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  if (expect && !expect->same_architecture(stored)) {
    throw CheckpointError("checkpoint architecture does not match the requested config");
  }
  const std::size_t total = header["payload_floats"].get<std::size_t>();
  if (buf.size() != kPreamble + hlen + 4 * total) {
    throw CheckpointError("checkpoint payload has " + std::to_string(buf.size() - kPreamble - hlen) +
                          " bytes, manifest needs " + std::to_string(4 * total));
  }
  auto model = std::make_unique<Model>(expect ? *expect : stored);
  const auto& entries = model->params().entries();
  const Json& manifest = header["params"];
  if (!manifest.is_array() || manifest.size() != entries.size()) {
    throw CheckpointError("checkpoint manifest lists " + std::to_string(manifest.size()) + " tensors, model has " +
                          std::to_string(entries.size()));
  }
  // Validate the whole manifest before copying anything.
  std::size_t offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Json& e = manifest[i];
    const Shape s = entries[i].second.shape();
    const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    if (e.at("name").get<std::string>() != entries[i].first || shape != std::vector<int>{s.n, s.c, s.h, s.w}) {
      throw CheckpointError("checkpoint entry " + std::to_string(i) + " (" + e.at("name").get<std::string>() +
                            ") does not match model parameter " + entries[i].first);
    }
    if (e.at("offset").get<std::size_t>() != offset) {
      throw CheckpointError("checkpoint offsets do not tile the payload at " + entries[i].first);
    }
    offset += s.numel();
  }
  if (offset != total) throw CheckpointError("checkpoint payload size disagrees with the manifest");
  std::size_t at = kPreamble + hlen;
  for (const auto& [name, t] : entries) {
    std::vector<double> v(t.numel());
    for (double& x : v) {
      x = static_cast<double>(std::bit_cast<float>(get_u32(buf, at)));
      at += 4;
    }
    Tensor leaf = t;
    try {
      leaf.assign(v);
    } catch (const NumericsError& e) {
      throw CheckpointError("checkpoint value in " + name + ": " + e.what());
    }
  }
  return model;
}

}  // namespace

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path) { return load_impl(path, nullptr); }

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  config.validate();
  return load_impl(path, &config);
}

// ---- training ----------------------------------------------------------------

Adam::Adam(const ParameterSet& params, AdamOptions opts) : params_(&params), opts_(opts) {
  for (const auto& [name, t] : params.entries()) {
    m_[name].assign(t.numel(), 0.0);
    v_[name].assign(t.numel(), 0.0);
  }
}

void Adam::step(const Gradients& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (const auto& [name, param] : params_->entries()) {
    const auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("Adam: no gradient for " + name);
    auto g = it->second.values();
    auto& m = m_.at(name);
    auto& v = v_.at(name);
    std::vector<double> next(param.values().begin(), param.values().end());
    for (std::size_t i = 0; i < next.size(); ++i) {
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
      next[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.eps);
    }
    Tensor leaf = param;
    leaf.assign(next);
  }
}

const std::vector<double>& Adam::first_moment(const std::string& name) const { return m_.at(name); }
const std::vector<double>& Adam::second_moment(const std::string& name) const { return v_.at(name); }

double learning_rate(const TrainOptions& opts, long step) {
  double lr = opts.adam.lr;
  for (double m : opts.milestones) {
    if (step >= std::llround(m * static_cast<double>(opts.steps))) lr *= opts.lr_decay;
  }
  return lr;
}

std::vector<StepRecord> train(Model& model, const std::vector<ImagePair>& data, const TrainOptions& opts,
                              const std::function<void(const StepRecord&)>& on_step) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  if (opts.steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  const Objective objective(opts.objective);
  Adam adam(model.params(), opts.adam);
  std::vector<StepRecord> history;
  history.reserve(static_cast<std::size_t>(opts.steps));
  for (long step = 0; step < opts.steps; ++step) {
    const std::uint64_t s = mix_seed(opts.seed, static_cast<std::uint64_t>(step));
    Rng rng(s);
    StepRecord rec;
    rec.step = step;
    rec.lr = learning_rate(opts, step);
    rec.sample = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(data.size())));
    const ImagePair pair = crop_flip_augment(data[rec.sample], opts.augment, mix_seed(s, 1));
    try {
      const Tensor low = to_tensor(pair.low);
      const Tensor high = to_tensor(pair.high);
      const Tensor target = len_target(low, high);
      const ModelOutput out = model.run(low, RunMode{true, mix_seed(s, 2)});
      const LossTerms terms = objective(out.image, high, out.prior.defined() ? out.prior : target, target);
      rec.loss = terms.report();
      if (!std::isfinite(rec.loss.total)) throw NonFiniteError("loss is not finite");
      const Gradients grads = backward(terms.total, model.params());
      for (const auto& [name, g] : grads)
        for (double v : g.values())
          if (!std::isfinite(v)) throw NonFiniteError("gradient of " + name + " is not finite");
      adam.step(grads, rec.lr);
    } catch (const NumericsError& e) {
      if (dynamic_cast<const DimensionError*>(&e)) throw;
      throw DivergenceError(step, e.what());
    }
    if (on_step) on_step(rec);
    history.push_back(rec);
  }
  return history;
}

EvalSummary evaluate(const Model& model, const std::vector<ImagePair>& data, const ObjectiveOptions& objective) {
  if (data.empty()) throw std::invalid_argument("evaluate: dataset is empty");
  NoGradGuard no_grad;
  const Objective obj(objective);
  EvalSummary sum;
  for (const ImagePair& p : data) {
    const Tensor low = to_tensor(p.low);
    const Tensor high = to_tensor(p.high);
    const Tensor target = len_target(low, high);
    const ModelOutput out = enhance(model, low);
    const LossReport r = obj(out.image, high, out.prior.defined() ? out.prior : target, target).report();
    for (std::size_t i = 0; i < r.terms.size(); ++i) sum.loss.terms[i] += r.terms[i];
    sum.loss.total += r.total;
    sum.psnr += psnr(out.image, high);
    sum.ssim += ssim_metric(out.image, high);
    sum.input_psnr += psnr(low, high);
  }
  const double n = static_cast<double>(data.size());
  for (double& t : sum.loss.terms) t /= n;
  sum.loss.total /= n;
  sum.psnr /= n;
  sum.ssim /= n;
  sum.input_psnr /= n;
  return sum;
}

}  // namespace dimlight
