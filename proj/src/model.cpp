#include "canet/model.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "canet/cant_io.hpp"
#include "canet/errors.hpp"
#include "canet/ops.hpp"
#include "json.hpp"

namespace canet {

using nlohmann::json;

namespace {

constexpr const char* kDisease[2] = {"dr", "dme"};

template <typename T>
LinearParams<T> init_linear(std::size_t out, std::size_t in, RngState& rng) {
  return {kaiming_uniform<T>({out, in}, in, rng), Tensor<T>({out})};
}

template <typename T, typename U>
LinearParams<U> cast_linear(const LinearParams<T>& l) {
  return {l.w.template cast<U>(), l.b.template cast<U>()};
}

template <typename T, typename U>
SpecificAttentionParams<U> cast_specific(const SpecificAttentionParams<T>& s) {
  SpecificAttentionParams<U> o;
  o.channels = s.channels;
  o.reduction = s.reduction;
  o.kernel = s.kernel;
  o.mlp_bias = s.mlp_bias;
  o.w0 = s.w0.template cast<U>();
  o.w0_bias = s.w0_bias.template cast<U>();
  o.w1 = s.w1.template cast<U>();
  o.w1_bias = s.w1_bias.template cast<U>();
  o.conv = s.conv.template cast<U>();
  o.conv_bias = s.conv_bias.template cast<U>();
  return o;
}

template <typename T, typename U>
DependentAttentionParams<U> cast_dependent(const DependentAttentionParams<T>& s) {
  DependentAttentionParams<U> o;
  o.dim = s.dim;
  o.reduction = s.reduction;
  o.mlp_bias = s.mlp_bias;
  o.w0 = s.w0.template cast<U>();
  o.w0_bias = s.w0_bias.template cast<U>();
  o.w1 = s.w1.template cast<U>();
  o.w1_bias = s.w1_bias.template cast<U>();
  return o;
}

template <typename T>
void push_linear(std::vector<ParamRef<T>>& out, const std::string& name, LinearParams<T>& l) {
  out.push_back({name, &l.w});
  out.push_back({name + ".bias", &l.b});
}

template <typename T>
Var<T> apply_linear(Var<T> x, LinearParams<T>& l) {
  GradTape<T>& tape = *x.tape;
  return linear<T>(x, tape.leaf(l.w), tape.leaf(l.b));
}

std::size_t specific_count(std::size_t c, std::size_t red, std::size_t k, bool bias) {
  const std::size_t h = c / red;
  return 2 * c * h + (bias ? h + c : 0) + 2 * k * k + 1;
}

std::size_t dependent_count(std::size_t d, std::size_t red, bool bias) {
  const std::size_t h = d / red;
  return 2 * d * h + (bias ? h + d : 0);
}

}  // namespace

void BackboneConfig::validate() const {
  if (widths.empty() || widths.size() != strides.size()) {
    throw ConfigError("backbone: widths and strides must be non-empty and of equal length");
  }
  if (in_channels == 0 || kernel == 0 || kernel % 2 == 0) {
    throw ConfigError("backbone: in_channels must be >= 1 and kernel odd");
  }
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0 || strides[i] == 0) throw ConfigError("backbone: widths and strides must be >= 1");
  }
}

std::size_t BackboneConfig::total_stride() const {
  std::size_t s = 1;
  for (std::size_t v : strides) s *= v;
  return s;
}

std::size_t BackboneConfig::output_side(std::size_t input) const {
  const std::size_t pad = (kernel - 1) / 2;
  for (std::size_t s : strides) input = (input + 2 * pad - kernel) / s + 1;
  return input;
}

void AblationFlags::validate() const {
  const int modes = int(individual_a) + int(individual_b) + int(joint_baseline) + int(d_specific);
  if (modes != 1) {
    throw UsageError(
        "ablation: exactly one of individual_a, individual_b, joint_baseline, d_specific must be set");
  }
  if ((dep_a_to_b || dep_b_to_a) && !d_specific) {
    throw UsageError("ablation: dep_a_to_b / dep_b_to_a require d_specific");
  }
}

Variant AblationFlags::variant() const {
  validate();
  if (individual_a) return Variant::individual_a;
  if (individual_b) return Variant::individual_b;
  if (joint_baseline) return Variant::joint_baseline;
  return Variant::canet;
}

std::string AblationFlags::label() const {
  switch (variant()) {
    case Variant::individual_a: return "individual_a";
    case Variant::individual_b: return "individual_b";
    case Variant::joint_baseline: return "joint_baseline";
    case Variant::canet: break;
  }
  if (dep_a_to_b && dep_b_to_a) return "canet";
  if (dep_a_to_b) return "canet_ds_a2b";
  if (dep_b_to_a) return "canet_ds_b2a";
  return "canet_ds_only";
}

void CanetConfig::validate() const {
  if (num_classes_a < 2 || num_classes_b < 2) throw ConfigError("model: num_classes must be >= 2");
  if (!(lambda >= 0)) throw ConfigError("model: lambda must be >= 0");
  if (!(dropout >= 0 && dropout < 1) || !(proj_dropout >= 0 && proj_dropout < 1)) {
    throw ConfigError("model: dropout rates must lie in [0, 1)");
  }
  if (proj_dim == 0) throw ConfigError("model: proj_dim must be >= 1");
  backbone.validate();
  ablation.validate();
  if (ablation.d_specific) {
    const std::size_t c = backbone.out_channels();
    if (reduction == 0 || c % reduction != 0 || proj_dim % reduction != 0) {
      throw ConfigError("model: reduction " + std::to_string(reduction) +
                        " must divide backbone channels " + std::to_string(c) + " and proj_dim " +
                        std::to_string(proj_dim));
    }
    if (spatial_kernel % 2 == 0) throw ConfigError("model: spatial_kernel must be odd");
  }
}

template <typename T>
CanetParams<T> CanetParams<T>::init(const CanetConfig& cfg, RngState& rng) {
  cfg.validate();
  CanetParams p;
  const BackboneConfig& bb = cfg.backbone;
  std::size_t cin = bb.in_channels;
  for (std::size_t w : bb.widths) {
    const std::size_t fan_in = cin * bb.kernel * bb.kernel;
    p.backbone_w.push_back(kaiming_uniform<T>({w, cin, bb.kernel, bb.kernel}, fan_in, rng));
    p.backbone_b.emplace_back(Shape{w});
    cin = w;
  }
  const std::size_t c = bb.out_channels();
  const std::size_t classes[2] = {cfg.num_classes_a, cfg.num_classes_b};
  switch (cfg.ablation.variant()) {
    case Variant::individual_a:
      p.head_refined[0] = init_linear<T>(classes[0], c, rng);
      break;
    case Variant::individual_b:
      p.head_refined[1] = init_linear<T>(classes[1], c, rng);
      break;
    case Variant::joint_baseline:
      for (int d = 0; d < 2; ++d) p.head_refined[d] = init_linear<T>(classes[d], c, rng);
      break;
    case Variant::canet:
      for (int d = 0; d < 2; ++d) {
        p.specific[d] = SpecificAttentionParams<T>::init(c, cfg.reduction, cfg.spatial_kernel,
                                                         cfg.mlp_bias, rng);
        p.project[d] = init_linear<T>(cfg.proj_dim, c, rng);
      }
      if (cfg.ablation.dep_a_to_b) {
        p.dep_a_to_b = DependentAttentionParams<T>::init(cfg.proj_dim, cfg.reduction, cfg.mlp_bias, rng);
      }
      if (cfg.ablation.dep_b_to_a) {
        p.dep_b_to_a = DependentAttentionParams<T>::init(cfg.proj_dim, cfg.reduction, cfg.mlp_bias, rng);
      }
      for (int d = 0; d < 2; ++d) {
        p.head_refined[d] = init_linear<T>(classes[d], cfg.proj_dim, rng);
        p.head_specific[d] = init_linear<T>(classes[d], cfg.proj_dim, rng);
      }
      break;
  }
  return p;
}

template <typename T>
std::vector<ParamRef<T>> CanetParams<T>::named_parameters() {
  std::vector<ParamRef<T>> out;
  for (std::size_t i = 0; i < backbone_w.size(); ++i) {
    const std::string stage = "backbone.stage" + std::to_string(i);
    out.push_back({stage + ".conv", &backbone_w[i]});
    out.push_back({stage + ".bias", &backbone_b[i]});
  }
  const bool attention = specific[0].has_value();
  for (int d = 0; d < 2; ++d) {
    if (specific[d]) {
      auto named = specific[d]->named(std::string("specific.") + kDisease[d]);
      out.insert(out.end(), named.begin(), named.end());
    }
  }
  for (int d = 0; d < 2; ++d) {
    if (project[d]) push_linear(out, std::string("project.") + kDisease[d], *project[d]);
  }
  if (dep_a_to_b) {
    auto named = dep_a_to_b->named("dependent.dr2dme");
    out.insert(out.end(), named.begin(), named.end());
  }
  if (dep_b_to_a) {
    auto named = dep_b_to_a->named("dependent.dme2dr");
    out.insert(out.end(), named.begin(), named.end());
  }
  for (int d = 0; d < 2; ++d) {
    const std::string base = std::string("head.") + kDisease[d];
    if (head_refined[d]) push_linear(out, attention ? base + ".refined" : base, *head_refined[d]);
    if (head_specific[d]) push_linear(out, base + ".specific", *head_specific[d]);
  }
  return out;
}

template <typename T>
std::size_t CanetParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& ref : const_cast<CanetParams*>(this)->named_parameters()) n += ref.tensor->numel();
  return n;
}

template <typename T>
template <typename U>
CanetParams<U> CanetParams<T>::cast() const {
  CanetParams<U> o;
  for (const auto& w : backbone_w) o.backbone_w.push_back(w.template cast<U>());
  for (const auto& b : backbone_b) o.backbone_b.push_back(b.template cast<U>());
  for (int d = 0; d < 2; ++d) {
    if (specific[d]) o.specific[d] = cast_specific<T, U>(*specific[d]);
    if (project[d]) o.project[d] = cast_linear<T, U>(*project[d]);
    if (head_refined[d]) o.head_refined[d] = cast_linear<T, U>(*head_refined[d]);
    if (head_specific[d]) o.head_specific[d] = cast_linear<T, U>(*head_specific[d]);
  }
  if (dep_a_to_b) o.dep_a_to_b = cast_dependent<T, U>(*dep_a_to_b);
  if (dep_b_to_a) o.dep_b_to_a = cast_dependent<T, U>(*dep_b_to_a);
  return o;
}

template <typename T>
Var<T> backbone_forward(Var<T> x, CanetParams<T>& p, const BackboneConfig& cfg) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != cfg.in_channels) {
    throw DimensionError("backbone: expected N×" + std::to_string(cfg.in_channels) +
                         "×H×W input, got " + shape_str(s));
  }
  if (s[2] < cfg.min_input() || s[3] < cfg.min_input()) {
    throw DimensionError("backbone: input " + shape_str(s) + " smaller than minimum side " +
                         std::to_string(cfg.min_input()));
  }
  if (p.backbone_w.size() != cfg.widths.size()) {
    throw DimensionError("backbone: parameter stages do not match config");
  }
  GradTape<T>& tape = *x.tape;
  const std::size_t pad = (cfg.kernel - 1) / 2;
  Var<T> h = x;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    h = relu(conv2d<T>(h, tape.leaf(p.backbone_w[i]), tape.leaf(p.backbone_b[i]),
                       Conv2dOptions{pad, pad, cfg.strides[i], cfg.strides[i]}));
  }
  return h;
}

template <typename T>
Var<T> project_features(Var<T> f_prime, LinearParams<T>& proj, double dropout_rate, RngState& rng,
                        bool training) {
  Var<T> pooled = pool(f_prime, PoolMode::global_avg);
  if (pooled.shape().size() == 1) pooled = reshape(pooled, Shape{1, pooled.shape()[0]});
  return apply_linear(dropout(pooled, dropout_rate, rng, training), proj);
}

template <typename T>
CanetOutput<T> canet_forward(Var<T> x, CanetParams<T>& p, const CanetConfig& cfg, RngState& rng,
                             const ForwardOptions& opt) {
  CanetOutput<T> out;
  GradTape<T>& tape = *x.tape;
  Var<T> f = dropout(backbone_forward(x, p, cfg.backbone), cfg.dropout, rng, opt.training);
  out.features = f;

  if (cfg.ablation.variant() != Variant::canet) {
    Var<T> pooled = pool(f, PoolMode::global_avg);
    if (p.head_refined[0]) out.logits_a_refined = apply_linear(pooled, *p.head_refined[0]);
    if (p.head_refined[1]) out.logits_b_refined = apply_linear(pooled, *p.head_refined[1]);
    return out;
  }

  Var<T> g[2] = {f, f};
  for (int d = 0; d < 2; ++d) {
    if (!p.specific[d] || !p.project[d]) throw UsageError("canet_forward: attention parameters missing");
    out.specific[d] = disease_specific_forward(f, *p.specific[d]);
    g[d] = project_features(out.specific[d]->features, *p.project[d], cfg.proj_dropout, rng,
                            opt.training);
    out.g[d] = g[d];
  }

  // Both directions read the un-fused features, so they apply simultaneously.
  Var<T> g_prime[2] = {g[0], g[1]};
  auto gate = [&](DependentAttentionParams<T>& dp, Var<T> src) {
    if (opt.zero_dependent_gates) return tape.constant(Tensor<T>(src.shape()));
    return dependent_attention(src, dp);
  };
  if (cfg.ablation.dep_a_to_b) {
    if (!p.dep_a_to_b) throw UsageError("canet_forward: dependent.dr2dme parameters missing");
    Var<T> a = gate(*p.dep_a_to_b, g[0]);
    out.dep_gate_a_to_b = a;
    g_prime[1] = dependent_fuse(g[1], a, g[0]);
  }
  if (cfg.ablation.dep_b_to_a) {
    if (!p.dep_b_to_a) throw UsageError("canet_forward: dependent.dme2dr parameters missing");
    Var<T> a = gate(*p.dep_b_to_a, g[1]);
    out.dep_gate_b_to_a = a;
    g_prime[0] = dependent_fuse(g[0], a, g[1]);
  }
  for (int d = 0; d < 2; ++d) out.g_prime[d] = g_prime[d];

  out.logits_a_refined = apply_linear(g_prime[0], *p.head_refined[0]);
  out.logits_b_refined = apply_linear(g_prime[1], *p.head_refined[1]);
  out.logits_a_specific = apply_linear(g[0], *p.head_specific[0]);
  out.logits_b_specific = apply_linear(g[1], *p.head_specific[1]);
  return out;
}

template <typename T>
Var<T> joint_loss(const CanetOutput<T>& out, std::span<const int> labels_a,
                  std::span<const int> labels_b, double lambda) {
  if (!(lambda >= 0)) throw ParameterError("joint_loss: lambda must be >= 0");
  std::optional<Var<T>> total;
  auto accumulate = [&](const std::optional<Var<T>>& logits, std::span<const int> labels, T weight) {
    if (!logits) return;
    if (labels.empty()) throw UsageError("joint_loss: labels missing for a present head");
    Var<T> term = softmax_cross_entropy(*logits, labels);
    if (weight != T{1}) term = scale(term, weight);
    total = total ? add(*total, term) : term;
  };
  accumulate(out.logits_a_refined, labels_a, T{1});
  accumulate(out.logits_b_refined, labels_b, T{1});
  if (lambda > 0) {
    accumulate(out.logits_a_specific, labels_a, static_cast<T>(lambda));
    accumulate(out.logits_b_specific, labels_b, static_cast<T>(lambda));
  }
  if (!total) throw UsageError("joint_loss: output carries no heads");
  return *total;
}

std::size_t argmax_row(std::span<const float> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

template <typename T>
std::vector<Prediction> predict(const CanetOutput<T>& out) {
  std::size_t n = 0;
  if (out.logits_a_refined) n = out.logits_a_refined->shape()[0];
  else if (out.logits_b_refined) n = out.logits_b_refined->shape()[0];
  std::vector<Prediction> preds(n);
  auto fill = [&](const std::optional<Var<T>>& logits, int Prediction::*field) {
    if (!logits) return;
    const Tensor<T>& v = logits->value();
    const std::size_t k = v.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      preds[i].*field = static_cast<int>(argmax_row(v.data().subspan(i * k, k)));
    }
  };
  fill(out.logits_a_refined, &Prediction::a);
  fill(out.logits_b_refined, &Prediction::b);
  return preds;
}

std::size_t attention_stack_param_count(std::size_t channels, std::size_t dim,
                                        std::size_t reduction, std::size_t kernel, bool mlp_bias) {
  return 2 * specific_count(channels, reduction, kernel, mlp_bias) +
         2 * dependent_count(dim, reduction, mlp_bias);
}

std::size_t closed_form_param_count(const CanetConfig& cfg) {
  const BackboneConfig& bb = cfg.backbone;
  std::size_t n = 0, cin = bb.in_channels;
  for (std::size_t w : bb.widths) {
    n += w * cin * bb.kernel * bb.kernel + w;
    cin = w;
  }
  const std::size_t c = bb.out_channels(), d = cfg.proj_dim;
  const std::size_t ka = cfg.num_classes_a, kb = cfg.num_classes_b;
  switch (cfg.ablation.variant()) {
    case Variant::individual_a: return n + (c + 1) * ka;
    case Variant::individual_b: return n + (c + 1) * kb;
    case Variant::joint_baseline: return n + (c + 1) * (ka + kb);
    case Variant::canet: break;
  }
  n += 2 * specific_count(c, cfg.reduction, cfg.spatial_kernel, cfg.mlp_bias);
  n += 2 * (c * d + d);
  if (cfg.ablation.dep_a_to_b) n += dependent_count(d, cfg.reduction, cfg.mlp_bias);
  if (cfg.ablation.dep_b_to_a) n += dependent_count(d, cfg.reduction, cfg.mlp_bias);
  n += 2 * (d + 1) * (ka + kb);
  return n;
}

namespace {

json parse_or_empty(const std::string& text) {
  if (text.empty()) return json::object();
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: embedded JSON is malformed: ") + e.what());
  }
}

json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("checkpoint: " + path.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, CanetParams<float>& params,
                     const CheckpointMeta& meta) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("checkpoint: cannot create " + dir.string() + ": " + ec.message());
  json tensors = json::array();
  for (const auto& ref : params.named_parameters()) {
    const std::string file = ref.name + ".cant";
    write_cant(dir / file, *ref.tensor);
    tensors.push_back({{"name", ref.name}, {"file", file}, {"shape", ref.tensor->shape()}});
  }
  json manifest = {
      {"format", "canet-checkpoint"},
      {"version", 1},
      {"config", parse_or_empty(meta.config_json)},
      {"epoch", meta.epoch},
      {"step", meta.step},
      {"rng", {{"seed", meta.rng_seed}, {"counter", meta.rng_counter}}},
      {"metrics", parse_or_empty(meta.metrics_json)},
      {"tensors", tensors},
  };
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << manifest.dump(2) << '\n';
  if (!out) throw DataError("checkpoint: failed writing " + (dir / "manifest.json").string());
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir) {
  const json m = read_manifest(dir);
  if (m.value("format", "") != "canet-checkpoint") {
    throw DataError("checkpoint: " + (dir / "manifest.json").string() + " is not a canet checkpoint");
  }
  CheckpointMeta meta;
  meta.config_json = m.at("config").dump();
  meta.epoch = m.at("epoch").get<std::size_t>();
  meta.step = m.at("step").get<std::size_t>();
  meta.rng_seed = m.at("rng").at("seed").get<std::uint64_t>();
  meta.rng_counter = m.at("rng").at("counter").get<std::uint64_t>();
  meta.metrics_json = m.at("metrics").dump();
  return meta;
}

CheckpointMeta load_checkpoint(const std::filesystem::path& dir, CanetParams<float>& params) {
  const CheckpointMeta meta = read_checkpoint_meta(dir);
  const json m = read_manifest(dir);
  std::map<std::string, std::string> files;
  for (const auto& t : m.at("tensors")) files[t.at("name").get<std::string>()] = t.at("file").get<std::string>();
  for (const auto& ref : params.named_parameters()) {
    auto it = files.find(ref.name);
    if (it == files.end()) {
      throw ConfigError("checkpoint: " + dir.string() + " has no tensor '" + ref.name +
                        "' required by the configured model");
    }
    Tensor<float> t = read_cant(dir / it->second);
    if (t.shape() != ref.tensor->shape()) {
      throw ConfigError("checkpoint: tensor '" + ref.name + "' has shape " + shape_str(t.shape()) +
                        " but the configured model expects " + shape_str(ref.tensor->shape()));
    }
    *ref.tensor = std::move(t);
  }
  return meta;
}

#define CANET_INSTANTIATE_MODEL(T)                                                             \
  template struct CanetParams<T>;                                                              \
  template Var<T> backbone_forward<T>(Var<T>, CanetParams<T>&, const BackboneConfig&);         \
  template Var<T> project_features<T>(Var<T>, LinearParams<T>&, double, RngState&, bool);      \
  template CanetOutput<T> canet_forward<T>(Var<T>, CanetParams<T>&, const CanetConfig&,        \
                                           RngState&, const ForwardOptions&);                  \
  template Var<T> joint_loss<T>(const CanetOutput<T>&, std::span<const int>,                   \
                                std::span<const int>, double);                                 \
  template std::vector<Prediction> predict<T>(const CanetOutput<T>&);

CANET_INSTANTIATE_MODEL(float)
CANET_INSTANTIATE_MODEL(double)
template CanetParams<double> CanetParams<float>::cast<double>() const;
template CanetParams<float> CanetParams<double>::cast<float>() const;

}  // namespace canet
