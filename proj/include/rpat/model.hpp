#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "rpat/core.hpp"
#include "rpat/data.hpp"

namespace rpat {

enum class ArchKind { mlp, cnn };
enum class Activation { relu, identity };

/// Fully determines the layer stack and the parameter count.
///
/// mlp: one dense layer per entry of `hidden`, then a dense layer to
/// `num_classes`. An empty `hidden` gives a single linear layer.
/// cnn: one `kernel` x `kernel` convolution per entry of `hidden` (the output
/// channel counts), zero padding kernel / 2 and stride `stride`, then a dense
/// layer to `num_classes`.
///
/// `identity` activation turns every hidden layer into an affine map, which is
/// how the affine fixtures used by the verification suites are built.
struct ArchitectureDescriptor {
  ArchKind kind = ArchKind::mlp;
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::relu;
  std::size_t num_classes = 2;
  InputShape input_shape = InputShape::flat(2);
  std::size_t kernel = 3;
  std::size_t stride = 2;

  bool operator==(const ArchitectureDescriptor&) const = default;

  std::string canonical() const {
    const std::string in =
        input_shape.image
            ? fmt::format("image:{}x{}x{}", input_shape.height, input_shape.width,
                          input_shape.channels)
            : fmt::format("flat:{}", input_shape.size());
    std::string s = fmt::format("{} in={} hidden={} act={} classes={}",
                                kind == ArchKind::mlp ? "mlp" : "cnn", in,
                                hidden.empty() ? std::string("none")
                                               : fmt::format("{}", fmt::join(hidden, ",")),
                                activation == Activation::relu ? "relu" : "identity",
                                num_classes);
    if (kind == ArchKind::cnn) s += fmt::format(" kernel={} stride={}", kernel, stride);
    return s;
  }

  static ArchitectureDescriptor parse(std::string_view text) {
    ArchitectureDescriptor d;
    std::istringstream in{std::string(text)};
    std::string kind;
    in >> kind;
    if (kind == "mlp") d.kind = ArchKind::mlp;
    else if (kind == "cnn") d.kind = ArchKind::cnn;
    else throw ParseError(fmt::format("unknown architecture kind '{}'", kind));
    bool has_classes = false;
    bool has_input = false;
    for (std::string tok; in >> tok;) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw ParseError("malformed architecture token " + tok);
      const std::string key = tok.substr(0, eq);
      const std::string val = tok.substr(eq + 1);
      try {
        if (key == "in") {
          if (val.rfind("flat:", 0) == 0) {
            d.input_shape = InputShape::flat(std::stoul(val.substr(5)));
          } else if (val.rfind("image:", 0) == 0) {
            std::size_t h = 0, w = 0, c = 0;
            char x1 = 0, x2 = 0;
            std::istringstream dims(val.substr(6));
            dims >> h >> x1 >> w >> x2 >> c;
            if (!dims || x1 != 'x' || x2 != 'x') throw ParseError("bad image shape " + val);
            d.input_shape = InputShape::grid(h, w, c);
          } else {
            throw ParseError("bad input shape " + val);
          }
          has_input = true;
        } else if (key == "hidden") {
          d.hidden.clear();
          if (val != "none") {
            std::istringstream parts(val);
            for (std::string p; std::getline(parts, p, ',');) d.hidden.push_back(std::stoul(p));
          }
        } else if (key == "act") {
          if (val == "relu") d.activation = Activation::relu;
          else if (val == "identity") d.activation = Activation::identity;
          else throw ParseError("unknown activation " + val);
        } else if (key == "classes") {
          d.num_classes = std::stoul(val);
          has_classes = true;
        } else if (key == "kernel") {
          d.kernel = std::stoul(val);
        } else if (key == "stride") {
          d.stride = std::stoul(val);
        } else {
          throw ParseError("unknown architecture key " + key);
        }
      } catch (const std::invalid_argument&) {
        throw ParseError("bad number in architecture token " + tok);
      } catch (const std::out_of_range&) {
        throw ParseError("bad number in architecture token " + tok);
      }
    }
    if (!has_classes || !has_input) throw ParseError("architecture text lacks in= or classes=");
    return d;
  }
};

enum class PerceptionProxy { logits, penultimate, antepenultimate };

inline PerceptionProxy parse_proxy(std::string_view s) {
  if (s == "logits") return PerceptionProxy::logits;
  if (s == "penultimate") return PerceptionProxy::penultimate;
  if (s == "antepenultimate") return PerceptionProxy::antepenultimate;
  throw ConfigError(fmt::format("unknown perception proxy '{}'", s));
}

inline std::string_view to_string(PerceptionProxy p) {
  switch (p) {
    case PerceptionProxy::logits: return "logits";
    case PerceptionProxy::penultimate: return "penultimate";
    case PerceptionProxy::antepenultimate: return "antepenultimate";
  }
  return "logits";
}

/// Flat parameter store; each layer owns a contiguous [weights | bias] slice.
struct ModelParams {
  std::vector<double> values;
  std::uint64_t version = 0;
};

struct LayerPlan {
  bool conv = false;
  bool activated = false;
  InputShape in;
  InputShape out;
  std::size_t weight_offset = 0;
  std::size_t weight_count = 0;
  std::size_t bias_offset = 0;
  std::size_t bias_count = 0;
};

// Pre-activations and activations of every layer for one input.
struct ForwardTrace {
  Vector input;
  std::vector<Vector> pre;
  std::vector<Vector> act;

  const Vector& logits() const { return act.back(); }
};

namespace detail {

inline std::vector<LayerPlan> plan_layers(const ArchitectureDescriptor& d) {
  if (d.num_classes < 2) throw ConfigError("architecture needs at least two classes");
  if (d.input_shape.size() == 0) throw ConfigError("architecture input is empty");
  std::vector<LayerPlan> plan;
  std::size_t offset = 0;
  InputShape cur = d.input_shape;
  auto add = [&](LayerPlan lp, std::size_t weights, std::size_t biases) {
    lp.weight_offset = offset;
    lp.weight_count = weights;
    lp.bias_offset = offset + weights;
    lp.bias_count = biases;
    offset += weights + biases;
    plan.push_back(lp);
    cur = lp.out;
  };
  if (d.kind == ArchKind::mlp) {
    for (std::size_t w : d.hidden) {
      if (w == 0) throw ConfigError("zero-width hidden layer");
      add({false, true, cur, InputShape::flat(w)}, w * cur.size(), w);
    }
  } else {
    if (!d.input_shape.image) throw ConfigError("cnn requires image-shaped input");
    if (d.kernel == 0 || d.stride == 0) throw ConfigError("cnn kernel and stride must be positive");
    const std::size_t pad = d.kernel / 2;
    for (std::size_t ch : d.hidden) {
      if (ch == 0) throw ConfigError("zero-channel convolution");
      if (cur.height + 2 * pad < d.kernel || cur.width + 2 * pad < d.kernel)
        throw ConfigError("convolution kernel larger than padded input");
      const std::size_t ho = (cur.height + 2 * pad - d.kernel) / d.stride + 1;
      const std::size_t wo = (cur.width + 2 * pad - d.kernel) / d.stride + 1;
      add({true, true, cur, InputShape::grid(ho, wo, ch)},
          ch * d.kernel * d.kernel * cur.channels, ch);
    }
  }
  add({false, false, cur, InputShape::flat(d.num_classes)}, d.num_classes * cur.size(),
      d.num_classes);
  if (d.activation == Activation::identity)
    for (auto& lp : plan) lp.activated = false;
  return plan;
}

}  // namespace detail

inline Vector softmax(const Vector& z) {
  const double m = z.maxCoeff();
  Vector e = (z.array() - m).exp();
  return e / e.sum();
}

inline Vector log_softmax(const Vector& z) {
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(const Vector& z) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < z.size(); ++i)
    if (z[i] > z[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
  return best;
}

class Model {
 public:
  Model() : Model(ArchitectureDescriptor{}) {}

  explicit Model(ArchitectureDescriptor desc)
      : desc_(std::move(desc)), plan_(detail::plan_layers(desc_)) {
    params_.values.assign(plan_.back().bias_offset + plan_.back().bias_count, 0.0);
  }

  /// He-style uniform initialization: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)),
  /// zero biases.
  static Model initialized(const ArchitectureDescriptor& desc, std::uint64_t seed) {
    Model m(desc);
    Rng rng = make_rng(seed, 0x1417);
    for (const auto& lp : m.plan_) {
      const std::size_t fan_in = lp.weight_count / (lp.conv ? lp.out.channels : lp.out.size());
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (std::size_t i = 0; i < lp.weight_count; ++i)
        m.params_.values[lp.weight_offset + i] = u(rng);
    }
    return m;
  }

  const ArchitectureDescriptor& descriptor() const { return desc_; }
  const std::vector<LayerPlan>& layers() const { return plan_; }
  std::size_t num_layers() const { return plan_.size(); }
  std::size_t num_params() const { return params_.values.size(); }
  std::size_t num_classes() const { return desc_.num_classes; }
  const InputShape& input_shape() const { return desc_.input_shape; }

  const ModelParams& params() const { return params_; }
  std::span<double> mutable_params() { return params_.values; }
  void bump_version() { ++params_.version; }

  void set_params(std::vector<double> values) {
    if (values.size() != params_.values.size())
      throw ContractError("parameter count does not match the architecture");
    params_.values = std::move(values);
    ++params_.version;
  }

  std::span<double> weights(std::size_t layer) {
    const auto& lp = plan_.at(layer);
    return {params_.values.data() + lp.weight_offset, lp.weight_count};
  }
  std::span<double> bias(std::size_t layer) {
    const auto& lp = plan_.at(layer);
    return {params_.values.data() + lp.bias_offset, lp.bias_count};
  }

  ForwardTrace trace(const Vector& x) const {
    check_input(x);
    ForwardTrace t;
    t.input = x;
    t.pre.reserve(plan_.size());
    t.act.reserve(plan_.size());
    const Vector* a = &t.input;
    for (std::size_t l = 0; l < plan_.size(); ++l) {
      const auto& lp = plan_[l];
      Vector pre = lp.conv ? conv_forward(lp, *a) : dense_forward(lp, *a);
      if (!pre.allFinite()) throw NumericError(fmt::format("non-finite activation in layer {}", l));
      Vector act = lp.activated ? Vector(pre.cwiseMax(0.0)) : pre;
      t.pre.push_back(std::move(pre));
      t.act.push_back(std::move(act));
      a = &t.act.back();
    }
    return t;
  }

  Vector forward(const Vector& x) const { return trace(x).logits(); }

  std::vector<Vector> forward(std::span<const Vector> batch) const {
    std::vector<Vector> out;
    out.reserve(batch.size());
    for (const auto& x : batch) out.push_back(forward(x));
    return out;
  }

  std::size_t predict(const Vector& x) const { return argmax(forward(x)); }

  /// Layer index whose activation serves as the perception for `proxy`.
  std::size_t perception_layer(PerceptionProxy proxy) const {
    const std::size_t back = proxy == PerceptionProxy::logits        ? 1
                             : proxy == PerceptionProxy::penultimate ? 2
                                                                     : 3;
    if (plan_.size() < back)
      throw ConfigError(fmt::format("proxy '{}' needs at least {} layers, model has {}",
                                    to_string(proxy), back, plan_.size()));
    return plan_.size() - back;
  }

  Vector perception(const Vector& x, PerceptionProxy proxy) const {
    const std::size_t layer = perception_layer(proxy);
    return trace(x).act[layer];
  }

  /// Reverse pass. `seeds[l]`, when present, is dLoss/d(activation of layer l).
  /// Parameter gradients are accumulated (scaled) into `param_grad` when it is
  /// non-empty. Returns dLoss/d(input).
  Vector backward(const ForwardTrace& t, std::span<const std::optional<Vector>> seeds,
                  std::span<double> param_grad, double scale = 1.0) const {
    if (seeds.size() != plan_.size()) throw ContractError("one seed slot per layer expected");
    if (!param_grad.empty() && param_grad.size() != params_.values.size())
      throw ContractError("gradient store is not congruent with the parameters");
    Vector g = Vector::Zero(t.act.back().size());
    bool any = false;
    for (std::size_t l = plan_.size(); l-- > 0;) {
      if (seeds[l]) {
        g += *seeds[l];
        any = true;
      }
      if (!any) {
        g = Vector::Zero(plan_[l].in.size());
        continue;
      }
      const auto& lp = plan_[l];
      Vector g_pre = lp.activated ? Vector((t.pre[l].array() > 0.0).select(g.array(), 0.0).matrix())
                                  : g;
      const Vector& a_in = l == 0 ? t.input : t.act[l - 1];
      g = lp.conv ? conv_backward(lp, a_in, g_pre, param_grad, scale)
                  : dense_backward(lp, a_in, g_pre, param_grad, scale);
      if (!g.allFinite()) throw NumericError(fmt::format("non-finite gradient in layer {}", l));
    }
    return any ? g : Vector::Zero(t.input.size());
  }

  /// Backward with a single seed on the logits.
  Vector backward_logits(const ForwardTrace& t, const Vector& dlogits,
                         std::span<double> param_grad, double scale = 1.0) const {
    std::vector<std::optional<Vector>> seeds(plan_.size());
    seeds.back() = dlogits;
    return backward(t, seeds, param_grad, scale);
  }

 private:
  void check_input(const Vector& x) const {
    if (static_cast<std::size_t>(x.size()) != desc_.input_shape.size())
      throw ContractError(fmt::format("input has {} features, model expects {}", x.size(),
                                      desc_.input_shape.size()));
  }

  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Eigen::Map<const RowMajor> dense_weights(const LayerPlan& lp) const {
    return {params_.values.data() + lp.weight_offset, static_cast<Eigen::Index>(lp.out.size()),
            static_cast<Eigen::Index>(lp.in.size())};
  }

  Vector dense_forward(const LayerPlan& lp, const Vector& a) const {
    const Eigen::Map<const Vector> b(params_.values.data() + lp.bias_offset,
                                     static_cast<Eigen::Index>(lp.bias_count));
    return dense_weights(lp) * a + b;
  }

  Vector dense_backward(const LayerPlan& lp, const Vector& a_in, const Vector& g_pre,
                        std::span<double> param_grad, double scale) const {
    if (!param_grad.empty()) {
      Eigen::Map<RowMajor> gw(param_grad.data() + lp.weight_offset,
                              static_cast<Eigen::Index>(lp.out.size()),
                              static_cast<Eigen::Index>(lp.in.size()));
      gw.noalias() += scale * g_pre * a_in.transpose();
      Eigen::Map<Vector> gb(param_grad.data() + lp.bias_offset,
                            static_cast<Eigen::Index>(lp.bias_count));
      gb += scale * g_pre;
    }
    return dense_weights(lp).transpose() * g_pre;
  }

  // Weight layout [out_ch][ky][kx][in_ch].
  Vector conv_forward(const LayerPlan& lp, const Vector& a) const {
    const long K = static_cast<long>(desc_.kernel), S = static_cast<long>(desc_.stride);
    const long P = K / 2;
    const long H = static_cast<long>(lp.in.height), W = static_cast<long>(lp.in.width);
    const long Ci = static_cast<long>(lp.in.channels);
    const long Ho = static_cast<long>(lp.out.height), Wo = static_cast<long>(lp.out.width);
    const long Co = static_cast<long>(lp.out.channels);
    const double* w = params_.values.data() + lp.weight_offset;
    const double* b = params_.values.data() + lp.bias_offset;
    Vector out(Ho * Wo * Co);
    for (long r = 0; r < Ho; ++r)
      for (long c = 0; c < Wo; ++c)
        for (long o = 0; o < Co; ++o) {
          double s = b[o];
          for (long ky = 0; ky < K; ++ky) {
            const long ir = r * S + ky - P;
            if (ir < 0 || ir >= H) continue;
            for (long kx = 0; kx < K; ++kx) {
              const long ic = c * S + kx - P;
              if (ic < 0 || ic >= W) continue;
              const double* wk = w + ((o * K + ky) * K + kx) * Ci;
              const long base = (ir * W + ic) * Ci;
              for (long i = 0; i < Ci; ++i) s += wk[i] * a[base + i];
            }
          }
          out[(r * Wo + c) * Co + o] = s;
        }
    return out;
  }

  Vector conv_backward(const LayerPlan& lp, const Vector& a_in, const Vector& g_pre,
                       std::span<double> param_grad, double scale) const {
    const long K = static_cast<long>(desc_.kernel), S = static_cast<long>(desc_.stride);
    const long P = K / 2;
    const long H = static_cast<long>(lp.in.height), W = static_cast<long>(lp.in.width);
    const long Ci = static_cast<long>(lp.in.channels);
    const long Ho = static_cast<long>(lp.out.height), Wo = static_cast<long>(lp.out.width);
    const long Co = static_cast<long>(lp.out.channels);
    const double* w = params_.values.data() + lp.weight_offset;
    double* gw = param_grad.empty() ? nullptr : param_grad.data() + lp.weight_offset;
    double* gb = param_grad.empty() ? nullptr : param_grad.data() + lp.bias_offset;
    Vector g_in = Vector::Zero(a_in.size());
    for (long r = 0; r < Ho; ++r)
      for (long c = 0; c < Wo; ++c)
        for (long o = 0; o < Co; ++o) {
          const double go = g_pre[(r * Wo + c) * Co + o];
          if (go == 0.0) continue;
          if (gb) gb[o] += scale * go;
          for (long ky = 0; ky < K; ++ky) {
            const long ir = r * S + ky - P;
            if (ir < 0 || ir >= H) continue;
            for (long kx = 0; kx < K; ++kx) {
              const long ic = c * S + kx - P;
              if (ic < 0 || ic >= W) continue;
              const long widx = ((o * K + ky) * K + kx) * Ci;
              const long base = (ir * W + ic) * Ci;
              for (long i = 0; i < Ci; ++i) {
                g_in[base + i] += w[widx + i] * go;
                if (gw) gw[widx + i] += scale * go * a_in[base + i];
              }
            }
          }
        }
    return g_in;
  }

  ArchitectureDescriptor desc_;
  std::vector<LayerPlan> plan_;
  ModelParams params_;
};

/// Smallest |pre-activation| over the rectified layers of a trace; infinity
/// when no layer is rectified. Used to keep finite-difference probes off kinks.
inline double min_abs_preactivation(const Model& model, const ForwardTrace& t) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < model.num_layers(); ++l)
    if (model.layers()[l].activated) m = std::min(m, t.pre[l].cwiseAbs().minCoeff());
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "RPATCKPT <format version>\n"
//   "arch <canonical descriptor>\n"
//   "params <count>\n"
//   count x float64, little-endian, descriptor order
//   uint64 little-endian metadata length, then canonical JSON text

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

inline void put_u64le(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

inline std::uint64_t get_u64le(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw ParseError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes[i]} << (8 * i);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Model& model,
                             const nlohmann::json& metadata) {
  out << "RPATCKPT " << kCheckpointVersion << '\n'
      << "arch " << model.descriptor().canonical() << '\n'
      << "params " << model.num_params() << '\n';
  for (double v : model.params().values) detail::put_u64le(out, std::bit_cast<std::uint64_t>(v));
  const std::string meta = metadata.dump();
  detail::put_u64le(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
}

inline Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != fmt::format("RPATCKPT {}", kCheckpointVersion))
    throw ParseError("not a checkpoint or unsupported checkpoint version");
  if (!std::getline(in, line) || line.rfind("arch ", 0) != 0)
    throw ParseError("checkpoint lacks architecture line");
  Model model(ArchitectureDescriptor::parse(line.substr(5)));
  if (!std::getline(in, line) || line.rfind("params ", 0) != 0)
    throw ParseError("checkpoint lacks parameter count");
  const std::size_t count = std::stoull(line.substr(7));
  if (count != model.num_params())
    throw ParseError("checkpoint parameter count disagrees with its architecture");
  std::vector<double> values(count);
  for (auto& v : values) v = std::bit_cast<double>(detail::get_u64le(in));
  const std::uint64_t len = detail::get_u64le(in);
  std::string meta(len, '\0');
  if (!in.read(meta.data(), static_cast<std::streamsize>(len)))
    throw ParseError("truncated checkpoint metadata");
  model.set_params(std::move(values));
  Checkpoint ck{std::move(model), nlohmann::json::parse(meta, nullptr, false)};
  if (ck.metadata.is_discarded()) throw ParseError("checkpoint metadata is not valid JSON");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Model& model,
                            const nlohmann::json& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  write_checkpoint(out, model, metadata);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

}  // namespace rpat
