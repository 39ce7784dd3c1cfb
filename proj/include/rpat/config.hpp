#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "rpat/attack.hpp"
#include "rpat/core.hpp"
#include "rpat/data.hpp"
#include "rpat/loss.hpp"
#include "rpat/model.hpp"
#include "rpat/train.hpp"

namespace rpat {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kOutputRootEnv = "RPAT_OUTPUT_ROOT";

struct DataSpec {
  std::string source = "synthetic";  // synthetic | idx
  std::uint64_t seed = 0;
  std::size_t n_per_class = 1500;
  std::size_t num_classes = 2;
  SyntheticLayout layout = SyntheticLayout::two_arcs;
  double noise_sigma = 0.1;
  std::string images;
  std::string labels;
  double train_frac = 0.8;
  double val_frac = 0.1;
  AugmentConfig augment;
};

struct EvalSpec {
  AttackKind attack = AttackKind::pgd;
  Budget budget{Norm::linf, 0.1, 0.025, 20, true};
  PerceptionProxy proxy = PerceptionProxy::logits;
  double probe_step = 0.5;  // curvature probe, as a multiple of the perturbation
  std::uint64_t seed = 1234;

  AttackSpec attack_spec() const { return {attack, budget, AttackLoss::cross_entropy}; }
};

/// Everything a run needs. Serializes to canonical JSON (sorted keys, every
/// field present); unknown keys are rejected on load.
struct ExperimentConfig {
  DataSpec data;
  ArchitectureDescriptor model;  // num_classes and input_shape come from the data
  TrainConfig train;
  EvalSpec eval;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string output_dir = "runs";

  /// Desk defaults: 60 epochs with decay at 40 and 50, PGD-10 training and
  /// PGD-20 evaluation at epsilon 0.1 (linf) on two-arc data.
  static ExperimentConfig defaults() {
    ExperimentConfig c;
    c.train.budget = {Norm::linf, 0.1, 0.025, 10, true};
    c.train.loss.method = LossMethod::rpat;
    return c;
  }

  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig t = train;
    t.seed = seed;
    t.augment = data.augment;
    return t;
  }
};

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(fmt::format("'{}' must be an object", where));
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, _] : j.items())
    if (!ok.count(k)) throw ConfigError(fmt::format("unknown config key '{}{}'", where.empty() ? "" : where + ".", k));
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("bad value for '{}.{}': {}", where, key, e.what()));
  }
}

inline json budget_to_json(const Budget& b) {
  return {{"norm", std::string(to_string(b.norm))},
          {"epsilon", b.epsilon},
          {"step_size", b.step_size},
          {"num_steps", b.num_steps},
          {"random_start", b.random_start}};
}

inline Budget budget_from_json(const json& j, Budget b, const std::string& where) {
  check_keys(j, {"norm", "epsilon", "step_size", "num_steps", "random_start"}, where);
  std::string norm(to_string(b.norm));
  read(j, "norm", norm, where);
  b.norm = parse_norm(norm);
  read(j, "epsilon", b.epsilon, where);
  read(j, "step_size", b.step_size, where);
  read(j, "num_steps", b.num_steps, where);
  read(j, "random_start", b.random_start, where);
  return b;
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& d = c.data;
  const auto& t = c.train;
  const auto& l = t.loss;
  return json{
      {"schema_version", kConfigSchemaVersion},
      {"data",
       {{"source", d.source},
        {"seed", d.seed},
        {"n_per_class", d.n_per_class},
        {"num_classes", d.num_classes},
        {"layout", std::string(to_string(d.layout))},
        {"noise_sigma", d.noise_sigma},
        {"images", d.images},
        {"labels", d.labels},
        {"train_frac", d.train_frac},
        {"val_frac", d.val_frac},
        {"augment",
         {{"enabled", d.augment.enabled},
          {"crop_padding", d.augment.crop_padding},
          {"hflip_prob", d.augment.hflip_prob}}}}},
      {"model",
       {{"kind", c.model.kind == ArchKind::mlp ? "mlp" : "cnn"},
        {"hidden", c.model.hidden},
        {"activation", c.model.activation == Activation::relu ? "relu" : "identity"},
        {"kernel", c.model.kernel},
        {"stride", c.model.stride}}},
      {"train",
       {{"lr", t.lr},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"lr_milestones", t.lr_milestones},
        {"lr_factor", t.lr_factor},
        {"attack", std::string(to_string(t.attack))},
        {"val_attack_steps", t.val_attack_steps},
        {"strict_deterministic", t.strict_deterministic},
        {"threads", t.threads}}},
      {"budget", detail::budget_to_json(t.budget)},
      {"eval",
       {{"attack", std::string(to_string(c.eval.attack))},
        {"budget", detail::budget_to_json(c.eval.budget)},
        {"proxy", std::string(to_string(c.eval.proxy))},
        {"probe_step", c.eval.probe_step},
        {"seed", c.eval.seed}}},
      {"loss",
       {{"method", std::string(to_string(l.method))},
        {"lambda", l.rpat.lambda},
        {"alpha", l.rpat.alpha},
        {"alpha_mode", std::string(to_string(l.rpat.alpha_mode))},
        {"divergence", std::string(to_string(l.rpat.divergence))},
        {"proxy", std::string(to_string(l.rpat.proxy))},
        {"trades_beta", l.trades_beta}}},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir}};
}

/// Missing keys keep their defaults; unknown keys and bad values throw ConfigError.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  ExperimentConfig c = ExperimentConfig::defaults();
  detail::check_keys(j, {"schema_version", "data", "model", "train", "budget", "eval", "loss",
                         "seeds", "output_dir"},
                     "");
  int version = kConfigSchemaVersion;
  read(j, "schema_version", version, "");
  if (version != kConfigSchemaVersion)
    throw ConfigError(fmt::format("unsupported schema_version {}", version));

  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::check_keys(d, {"source", "seed", "n_per_class", "num_classes", "layout", "noise_sigma",
                           "images", "labels", "train_frac", "val_frac", "augment"},
                       "data");
    read(d, "source", c.data.source, "data");
    if (c.data.source != "synthetic" && c.data.source != "idx")
      throw ConfigError("data.source must be 'synthetic' or 'idx'");
    read(d, "seed", c.data.seed, "data");
    read(d, "n_per_class", c.data.n_per_class, "data");
    read(d, "num_classes", c.data.num_classes, "data");
    std::string layout(to_string(c.data.layout));
    read(d, "layout", layout, "data");
    c.data.layout = parse_layout(layout);
    read(d, "noise_sigma", c.data.noise_sigma, "data");
    read(d, "images", c.data.images, "data");
    read(d, "labels", c.data.labels, "data");
    read(d, "train_frac", c.data.train_frac, "data");
    read(d, "val_frac", c.data.val_frac, "data");
    if (d.contains("augment")) {
      const auto& a = d["augment"];
      detail::check_keys(a, {"enabled", "crop_padding", "hflip_prob"}, "data.augment");
      read(a, "enabled", c.data.augment.enabled, "data.augment");
      read(a, "crop_padding", c.data.augment.crop_padding, "data.augment");
      read(a, "hflip_prob", c.data.augment.hflip_prob, "data.augment");
    }
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::check_keys(m, {"kind", "hidden", "activation", "kernel", "stride"}, "model");
    std::string kind = c.model.kind == ArchKind::mlp ? "mlp" : "cnn";
    read(m, "kind", kind, "model");
    if (kind == "mlp") c.model.kind = ArchKind::mlp;
    else if (kind == "cnn") c.model.kind = ArchKind::cnn;
    else throw ConfigError("model.kind must be 'mlp' or 'cnn'");
    read(m, "hidden", c.model.hidden, "model");
    std::string act = c.model.activation == Activation::relu ? "relu" : "identity";
    read(m, "activation", act, "model");
    if (act == "relu") c.model.activation = Activation::relu;
    else if (act == "identity") c.model.activation = Activation::identity;
    else throw ConfigError("model.activation must be 'relu' or 'identity'");
    read(m, "kernel", c.model.kernel, "model");
    read(m, "stride", c.model.stride, "model");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::check_keys(t, {"lr", "momentum", "weight_decay", "batch_size", "epochs",
                           "lr_milestones", "lr_factor", "attack", "val_attack_steps",
                           "strict_deterministic", "threads"},
                       "train");
    read(t, "lr", c.train.lr, "train");
    read(t, "momentum", c.train.momentum, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "lr_milestones", c.train.lr_milestones, "train");
    read(t, "lr_factor", c.train.lr_factor, "train");
    std::string attack(to_string(c.train.attack));
    read(t, "attack", attack, "train");
    c.train.attack = parse_attack_kind(attack);
    read(t, "val_attack_steps", c.train.val_attack_steps, "train");
    read(t, "strict_deterministic", c.train.strict_deterministic, "train");
    read(t, "threads", c.train.threads, "train");
  }
  if (j.contains("budget")) c.train.budget = detail::budget_from_json(j["budget"], c.train.budget, "budget");
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::check_keys(e, {"attack", "budget", "proxy", "probe_step", "seed"}, "eval");
    std::string attack(to_string(c.eval.attack));
    read(e, "attack", attack, "eval");
    c.eval.attack = parse_attack_kind(attack);
    if (e.contains("budget")) c.eval.budget = detail::budget_from_json(e["budget"], c.eval.budget, "eval.budget");
    std::string proxy(to_string(c.eval.proxy));
    read(e, "proxy", proxy, "eval");
    c.eval.proxy = parse_proxy(proxy);
    read(e, "probe_step", c.eval.probe_step, "eval");
    read(e, "seed", c.eval.seed, "eval");
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    detail::check_keys(l, {"method", "lambda", "alpha", "alpha_mode", "divergence", "proxy",
                           "trades_beta"},
                       "loss");
    auto& lc = c.train.loss;
    std::string method(to_string(lc.method));
    read(l, "method", method, "loss");
    lc.method = parse_loss_method(method);
    read(l, "lambda", lc.rpat.lambda, "loss");
    read(l, "alpha", lc.rpat.alpha, "loss");
    std::string mode(to_string(lc.rpat.alpha_mode));
    read(l, "alpha_mode", mode, "loss");
    lc.rpat.alpha_mode = parse_alpha_mode(mode);
    std::string div(to_string(lc.rpat.divergence));
    read(l, "divergence", div, "loss");
    lc.rpat.divergence = parse_divergence(div);
    std::string proxy(to_string(lc.rpat.proxy));
    read(l, "proxy", proxy, "loss");
    lc.rpat.proxy = parse_proxy(proxy);
    read(l, "trades_beta", lc.trades_beta, "loss");
  }
  read(j, "seeds", c.seeds, "");
  read(j, "output_dir", c.output_dir, "");
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  c.train.validate();
  c.eval.budget.validate();
  if (!(c.eval.probe_step > 0.0)) throw ConfigError("eval.probe_step must be positive");
  return c;
}

inline std::string canonical_text(const ExperimentConfig& c) { return to_json(c).dump(); }

/// FNV-1a 64, as 16 hex digits.
inline std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

inline std::string config_hash(const ExperimentConfig& c) { return fnv1a_hex(canonical_text(c)); }

inline std::string hash8(const std::string& hash) { return hash.substr(0, 8); }

/// Sets a dotted key path ("loss.lambda") to `value`. The value is read as
/// JSON when it parses as JSON and as a plain string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& dotted, const std::string& value) {
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  nlohmann::json* node = &j;
  std::stringstream ss(dotted);
  std::vector<std::string> parts;
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.empty() || dotted.empty()) throw ConfigError("empty override key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override path crosses a non-object: " + dotted);
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = parsed;
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON: " + path);
  return j;
}

inline DatasetSplits build_datasets(const DataSpec& spec) {
  Dataset full = spec.source == "idx"
                     ? load_idx(spec.images, spec.labels)
                     : generate_synthetic(spec.seed, spec.n_per_class, spec.num_classes,
                                          spec.layout, spec.noise_sigma);
  return split_dataset(full, spec.train_frac, spec.val_frac, spec.seed);
}

inline ArchitectureDescriptor architecture_for(const ExperimentConfig& c, const Dataset& ds) {
  ArchitectureDescriptor a = c.model;
  a.num_classes = ds.num_classes;
  a.input_shape = ds.input_shape;
  return a;
}

}  // namespace rpat
