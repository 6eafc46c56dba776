#include "canet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "canet/errors.hpp"
#include "canet/image.hpp"
#include "canet/ops.hpp"

namespace canet {

namespace {

template <typename T>
void adam_impl(std::span<const ParamRef<T>> params, AdamState& s, double lr) {
  if (!(lr >= 0)) throw ParameterError("adam_step: learning rate must be >= 0");
  for (const ParamRef<T>& p : params) {
    if (p.tensor->grad.size() != p.tensor->numel()) {
      throw UsageError("adam_step: parameter '" + p.name + "' has no gradient");
    }
  }
  ++s.t;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  const double step = lr / bc1;
  const double inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
  for (const ParamRef<T>& p : params) {
    std::vector<double>& m = s.m[p.name];
    std::vector<double>& v = s.v[p.name];
    const std::size_t n = p.tensor->numel();
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    std::span<T> w = p.tensor->data();
    const std::vector<T>& g = p.tensor->grad;
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = m[i] = s.beta1 * m[i] + (1 - s.beta1) * gi;
      const double vi = v[i] = s.beta2 * v[i] + (1 - s.beta2) * gi * gi;
      w[i] = static_cast<T>(static_cast<double>(w[i]) - step * mi / (std::sqrt(vi) * inv_sqrt_bc2 + s.eps));
    }
  }
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << *v;
  return os.str();
}

// Builds [B×C×S×S] from per-sample views.
Tensor<float> stack(const std::vector<Tensor<float>>& views) {
  const Shape& s = views.front().shape();
  Shape shape{views.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor<float> out(shape);
  const std::size_t per = views.front().numel();
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i].shape() != s) throw DataError("batch: images of differing shapes");
    std::copy(views[i].data().begin(), views[i].data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

Tensor<float> resized(const Tensor<float>& img, std::size_t side) {
  if (side == 0 || (img.dim(1) == side && img.dim(2) == side)) return img;
  return resize_bilinear(img, side, side);
}

}  // namespace

void adam_step(std::span<const ParamRef<float>> params, AdamState& state, double lr) {
  adam_impl<float>(params, state, lr);
}

void adam_step(std::span<const ParamRef<double>> params, AdamState& state, double lr) {
  adam_impl<double>(params, state, lr);
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_base, std::size_t restart_period) {
  if (total_steps == 0) throw ParameterError("cosine_lr: total_steps must be > 0");
  if (step >= total_steps) return 0.0;
  double phase;
  if (restart_period > 0) {
    phase = static_cast<double>(step % restart_period) / static_cast<double>(restart_period);
  } else {
    phase = static_cast<double>(step) / static_cast<double>(total_steps);
  }
  return lr_base * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train.lr must be a positive finite number");
  if (crop_to == 0) throw ConfigError("train.crop_to must be >= 1");
  if (resize_to != 0 && crop_to > resize_to) {
    throw ConfigError("train.crop_to (" + std::to_string(crop_to) + ") exceeds train.resize_to (" +
                      std::to_string(resize_to) + ")");
  }
  if (!(scale_min > 0 && scale_min <= 1)) throw ConfigError("train.scale_min must lie in (0, 1]");
  if (eval_every == 0) throw ConfigError("train.eval_every must be >= 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw ConfigError("train.adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be > 0");
}

std::pair<std::size_t, std::size_t> scaled_size(std::size_t height, std::size_t width, double area) {
  const double f = std::sqrt(area);
  // Epsilon so that an exact side (e.g. 64·1.0) never floors to one pixel less.
  return {static_cast<std::size_t>(std::floor(static_cast<double>(height) * f + 1e-9)),
          static_cast<std::size_t>(std::floor(static_cast<double>(width) * f + 1e-9))};
}

namespace {

void check_augment(std::size_t height, std::size_t width, std::size_t crop_to, double scale_min) {
  if (!(scale_min > 0 && scale_min <= 1)) throw ParameterError("augment: scale_min must lie in (0, 1]");
  const auto [h, w] = scaled_size(height, width, scale_min);
  if (crop_to == 0 || crop_to > std::min(h, w)) {
    throw ParameterError("augment: crop " + std::to_string(crop_to) + " larger than the scaled image " +
                         std::to_string(h) + "x" + std::to_string(w) + " (scale_min " +
                         std::to_string(scale_min) + ")");
  }
}

}  // namespace

AugmentDraw draw_augment(std::size_t height, std::size_t width, std::size_t crop_to, double scale_min,
                         RngState& rng) {
  check_augment(height, width, crop_to, scale_min);
  AugmentDraw d;
  d.area = rng.uniform(scale_min, 1.0);
  const auto [h, w] = scaled_size(height, width, d.area);
  d.y0 = static_cast<std::size_t>(rng.below(h - crop_to + 1));
  d.x0 = static_cast<std::size_t>(rng.below(w - crop_to + 1));
  d.flip_h = rng.bernoulli(0.5);
  d.flip_v = rng.bernoulli(0.5);
  return d;
}

Tensor<float> apply_augment(const Tensor<float>& img, const AugmentDraw& d, std::size_t crop_to) {
  if (img.rank() != 3) throw DimensionError("augment: expected [C×H×W], got " + shape_str(img.shape()));
  const auto [h, w] = scaled_size(img.dim(1), img.dim(2), d.area);
  if (crop_to == 0 || d.y0 + crop_to > h || d.x0 + crop_to > w) {
    throw ParameterError("augment: crop window outside the scaled image");
  }
  const Tensor<float> scaled = (h == img.dim(1) && w == img.dim(2)) ? img : resize_bilinear(img, h, w);
  const std::size_t c = img.dim(0);
  Tensor<float> out({c, crop_to, crop_to});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < crop_to; ++y) {
      const float* src = scaled.data().data() + (ch * h + d.y0 + y) * w + d.x0;
      std::copy(src, src + crop_to, out.data().begin() + static_cast<std::ptrdiff_t>((ch * crop_to + y) * crop_to));
    }
  }
  if (d.flip_h) out = flip_horizontal(out);
  if (d.flip_v) out = flip_vertical(out);
  return out;
}

Tensor<float> augment(const Tensor<float>& img, RngState& rng, std::size_t crop_to, double scale_min) {
  if (img.rank() != 3) throw DimensionError("augment: expected [C×H×W], got " + shape_str(img.shape()));
  return apply_augment(img, draw_augment(img.dim(1), img.dim(2), crop_to, scale_min, rng), crop_to);
}

Tensor<float> eval_view(const Tensor<float>& img, std::size_t crop_to) {
  if (img.dim(1) == crop_to && img.dim(2) == crop_to) return img;
  return center_crop(img, crop_to, crop_to);
}

std::string history_csv_header() { return "epoch,step,lr,train_loss,eval_joint_ac,eval_ac_a,eval_ac_b"; }

std::string history_csv_line(const HistoryRow& r) {
  std::ostringstream os;
  os.precision(9);
  os << r.epoch << ',' << r.step << ',' << std::scientific << r.lr << ',' << std::fixed << r.train_loss << ','
     << fmt_opt(r.eval_joint_ac) << ',' << fmt_opt(r.eval_ac_a) << ',' << fmt_opt(r.eval_ac_b);
  return os.str();
}

Evaluation evaluate(CanetParams<float>& params, const CanetConfig& cfg, std::span<const GradingSample> samples,
                    std::size_t crop_to, std::size_t batch_size) {
  if (samples.empty()) throw UndefinedMetricError("evaluate: no samples");
  if (batch_size == 0) throw ParameterError("evaluate: batch_size must be >= 1");
  Evaluation ev;
  const std::size_t ka = cfg.num_classes_a, kb = cfg.num_classes_b;
  RngState unused(0);
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<Tensor<float>> views;
    for (std::size_t i = start; i < end; ++i) views.push_back(eval_view(samples[i].image, crop_to));
    GradTape<float> tape;
    CanetOutput<float> out = canet_forward(tape.constant(stack(views)), params, cfg, unused);
    for (const Prediction& p : predict(out)) ev.predictions.push_back(p);
    if (out.logits_a_refined) {
      const Tensor<float> probs = softmax_rows(out.logits_a_refined->value());
      ev.probs_a.insert(ev.probs_a.end(), probs.data().begin(), probs.data().end());
    }
    if (out.logits_b_refined) {
      const Tensor<float> probs = softmax_rows(out.logits_b_refined->value());
      ev.probs_b.insert(ev.probs_b.end(), probs.data().begin(), probs.data().end());
    }
  }

  std::vector<int> la, lb, pa, pb;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    la.push_back(samples[i].grade_a);
    lb.push_back(samples[i].grade_b);
    pa.push_back(ev.predictions[i].a);
    pb.push_back(ev.predictions[i].b);
  }
  ev.report.n = samples.size();
  if (!ev.probs_a.empty()) ev.report.a = disease_metrics(ev.probs_a, pa, la, ka);
  if (!ev.probs_b.empty()) ev.report.b = disease_metrics(ev.probs_b, pb, lb, kb);
  if (ev.report.a && ev.report.b) {
    const std::vector<GradePair> labels = labels_of(samples);
    ev.report.joint_accuracy = joint_accuracy(ev.predictions, labels);
  }
  return ev;
}

double selection_score(const MetricsReport& r) {
  if (r.joint_accuracy) return *r.joint_accuracy;
  if (r.a) return r.a->accuracy;
  if (r.b) return r.b->accuracy;
  throw UsageError("selection_score: report carries no metrics");
}

TrainResult train(CanetParams<float>& params, const CanetConfig& cfg, const TrainConfig& tc,
                  std::span<const GradingSample> train_set, std::span<const GradingSample> eval_set,
                  const TrainOptions& opt) {
  cfg.validate();
  tc.validate();
  if (train_set.empty()) throw DataError("train: empty training set");

  std::vector<GradingSample> train_data, eval_data;
  for (const GradingSample& s : train_set) {
    train_data.push_back(s);
    train_data.back().image = resized(s.image, tc.resize_to);
  }
  for (const GradingSample& s : eval_set) {
    eval_data.push_back(s);
    eval_data.back().image = resized(s.image, tc.resize_to);
  }
  const std::vector<GradingSample>& eval_ref = eval_data.empty() ? train_data : eval_data;
  const std::size_t side = std::min(train_data.front().image.dim(1), train_data.front().image.dim(2));
  if (tc.crop_to > side) {
    throw ConfigError("train.crop_to (" + std::to_string(tc.crop_to) + ") exceeds the image side " +
                      std::to_string(side));
  }
  if (tc.augment) {
    const auto [h, w] = scaled_size(side, side, tc.scale_min);
    if (tc.crop_to > std::min(h, w)) {
      throw ConfigError("train.crop_to (" + std::to_string(tc.crop_to) + ") exceeds the image scaled by " +
                        "scale_min (" + std::to_string(std::min(h, w)) + " px); raise train.resize_to");
    }
  }

  const std::size_t n = train_data.size();
  const std::size_t batches = (n + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total_steps = batches * tc.epochs;
  const RngState root(tc.seed);
  const RngState shuffle_root = root.split(1), augment_root = root.split(2);
  RngState dropout_rng = root.split(3);

  AdamState adam;
  adam.beta1 = tc.adam_beta1;
  adam.beta2 = tc.adam_beta2;
  adam.eps = tc.adam_eps;

  std::optional<std::ofstream> history_file;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    history_file.emplace(*opt.out_dir / "history.csv");
    if (!*history_file) throw DataError("train: cannot write " + (*opt.out_dir / "history.csv").string());
    *history_file << history_csv_header() << '\n';
  }

  TrainResult result;
  std::vector<ParamRef<float>> named = params.named_parameters();
  std::size_t step = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    RngState shuffle = shuffle_root.split(epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    const RngState epoch_aug = augment_root.split(epoch);

    double loss_sum = 0;
    double lr = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t start = b * tc.batch_size, end = std::min(n, start + tc.batch_size);
      std::vector<Tensor<float>> views;
      std::vector<int> la, lb;
      for (std::size_t k = start; k < end; ++k) {
        const GradingSample& s = train_data[order[k]];
        if (tc.augment) {
          RngState r = epoch_aug.split(order[k]);
          views.push_back(augment(s.image, r, tc.crop_to, tc.scale_min));
        } else {
          views.push_back(eval_view(s.image, tc.crop_to));
        }
        la.push_back(s.grade_a);
        lb.push_back(s.grade_b);
      }
      // Indexing the schedule over total_steps - 1 puts the final batch at exactly 0.
      lr = total_steps > 1 ? cosine_lr(step, total_steps - 1, tc.lr, tc.restart_period) : tc.lr;
      for (ParamRef<float>& p : named) p.tensor->grad.clear();
      double loss_value = 0;
      try {
        GradTape<float> tape;
        CanetOutput<float> out =
            canet_forward(tape.constant(stack(views)), params, cfg, dropout_rng, ForwardOptions{.training = true});
        Var<float> loss = joint_loss(out, la, lb, cfg.lambda);
        loss_value = loss.value().item();
        if (!std::isfinite(loss_value)) throw NumericalError("loss is not finite");
        tape.backward(loss);
      } catch (const NumericalError& e) {
        throw NumericalError("train: epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                             " (step " + std::to_string(step) + "): " + e.what());
      }
      adam_step(std::span<const ParamRef<float>>(named), adam, lr);
      loss_sum += loss_value * static_cast<double>(end - start);
      ++step;
    }

    HistoryRow row;
    row.epoch = epoch;
    row.step = step;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(n);
    if (epoch % tc.eval_every == 0 || epoch == tc.epochs) {
      Evaluation ev = evaluate(params, cfg, eval_ref, tc.crop_to);
      row.eval_joint_ac = ev.report.joint_accuracy;
      if (ev.report.a) row.eval_ac_a = ev.report.a->accuracy;
      if (ev.report.b) row.eval_ac_b = ev.report.b->accuracy;
      const double score = selection_score(ev.report);
      if (!result.best_score || score > *result.best_score) {
        result.best_score = score;
        result.best_epoch = epoch;
        result.best_params = params;
        if (opt.out_dir) {
          CheckpointMeta meta;
          meta.config_json = opt.config_json;
          meta.epoch = epoch;
          meta.step = step;
          meta.rng_seed = tc.seed;
          meta.rng_counter = dropout_rng.counter();
          meta.metrics_json = ev.report.to_json(-1);
          save_checkpoint(*opt.out_dir / "best", params, meta);
        }
      }
    }
    result.history.push_back(row);
    if (history_file) *history_file << history_csv_line(row) << '\n' << std::flush;
    if (opt.on_epoch) opt.on_epoch(row);
  }
  result.steps = step;
  return result;
}

}  // namespace canet
