#pragma once

#include <cmath>
#include <vector>

#include "metadrn/episodes.hpp"
#include "metadrn/model.hpp"
#include "metadrn/nn.hpp"

namespace metadrn {

// Soft intersection-over-union: sum(p*t) / (sum(p) + sum(t) - sum(p*t)).
// Prediction values must lie in [0,1]; binary targets. Both-empty scores 1.
template <typename T>
double iou(const Tensor<T>& pred, const Tensor<T>& target) {
  check_arg(pred.shape() == target.shape(), "iou: shape mismatch " + shape_str(pred.shape()) +
                                                " vs " + shape_str(target.shape()));
  double inter = 0, psum = 0, tsum = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    double p = static_cast<double>(pred.data()[i]);
    check_arg(p >= -1e-6 && p <= 1.0 + 1e-6,
              "iou: prediction value " + std::to_string(p) + " outside [0,1]");
    p = std::clamp(p, 0.0, 1.0);
    const double t = static_cast<double>(target.data()[i]);
    inter += p * t;
    psum += p;
    tsum += t;
  }
  const double denom = psum + tsum - inter;
  return denom == 0.0 ? 1.0 : inter / denom;
}

template <typename T>
double thresholded_iou(const Tensor<T>& prob, const Tensor<T>& target, double thresh) {
  check_arg(thresh > 0.0 && thresh < 1.0, "thresholded_iou: threshold must be in (0,1)");
  Tensor<T> bin = Tensor<T>::uninit(prob.shape());
  for (int64_t i = 0; i < prob.numel(); ++i) {
    const double p = static_cast<double>(prob.data()[i]);
    check_arg(p >= -1e-6 && p <= 1.0 + 1e-6,
              "thresholded_iou: prediction value " + std::to_string(p) + " outside [0,1]");
    bin.raw()[i] = p >= thresh ? T(1) : T(0);
  }
  return iou(bin, target);
}

struct EvalRecord {
  int episode_id = 0;
  double soft_iou = 0;
  double iou_at_0_5 = 0;
  double iou_at_0_35 = 0;
  double query_loss = 0;
};

struct Summary {
  double mean = 0;
  double ci95_half_width = 0;
  int n = 0;
  bool has_ci = false;  // requires n >= 2; report "n/a" otherwise
};

inline Summary summarize(const std::vector<double>& values) {
  check_arg(!values.empty(), "summarize: no values");
  Summary s;
  s.n = static_cast<int>(values.size());
  double acc = 0;
  for (double v : values) acc += v;
  s.mean = acc / s.n;
  if (s.n >= 2) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    const double stddev = std::sqrt(ss / (s.n - 1));
    s.ci95_half_width = 1.96 * stddev / std::sqrt(static_cast<double>(s.n));
    s.has_ci = true;
  }
  return s;
}

inline Summary summarize(const std::vector<EvalRecord>& records, double EvalRecord::* field) {
  std::vector<double> values;
  values.reserve(records.size());
  for (const auto& r : records) values.push_back(r.*field);
  return summarize(values);
}

// Per-query-sample metrics from foreground probability maps, averaged over
// the query set.
template <typename T>
EvalRecord eval_from_probs(const Tensor<T>& probs, const Tensor<T>& targets, double query_loss,
                           double lo_thresh = 0.35, double hi_thresh = 0.5) {
  check_arg(probs.rank() == 3 && probs.shape() == targets.shape(),
            "eval_from_probs: expected matching [Q,H,W] tensors");
  const int64_t q = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
  EvalRecord rec;
  rec.query_loss = query_loss;
  for (int64_t i = 0; i < q; ++i) {
    Tensor<T> p = Tensor<T>::uninit({probs.dim(1), probs.dim(2)});
    Tensor<T> t = Tensor<T>::uninit({probs.dim(1), probs.dim(2)});
    std::copy_n(probs.data().data() + i * hw, hw, p.raw().data());
    std::copy_n(targets.data().data() + i * hw, hw, t.raw().data());
    rec.soft_iou += iou(p, t);
    rec.iou_at_0_5 += thresholded_iou(p, t, hi_thresh);
    rec.iou_at_0_35 += thresholded_iou(p, t, lo_thresh);
  }
  rec.soft_iou /= static_cast<double>(q);
  rec.iou_at_0_5 /= static_cast<double>(q);
  rec.iou_at_0_35 /= static_cast<double>(q);
  return rec;
}

template <typename T>
Tensor<T> stack_images(const std::vector<SegSample<T>>& samples) {
  check_arg(!samples.empty(), "stack_images: no samples");
  const auto& s0 = samples[0].image.shape();
  Tensor<T> out = Tensor<T>::uninit({static_cast<int64_t>(samples.size()), s0[0], s0[1], s0[2]});
  int64_t offset = 0;
  for (const auto& s : samples) {
    check_arg(s.image.shape() == s0, "stack_images: mixed shapes");
    std::copy(s.image.data().begin(), s.image.data().end(), out.raw().begin() + offset);
    offset += s.image.numel();
  }
  return out;
}

template <typename T>
Tensor<T> stack_masks(const std::vector<SegSample<T>>& samples) {
  check_arg(!samples.empty(), "stack_masks: no samples");
  const auto& s0 = samples[0].mask.shape();
  Tensor<T> out = Tensor<T>::uninit({static_cast<int64_t>(samples.size()), s0[0], s0[1]});
  int64_t offset = 0;
  for (const auto& s : samples) {
    check_arg(s.mask.shape() == s0, "stack_masks: mixed shapes");
    std::copy(s.mask.data().begin(), s.mask.data().end(), out.raw().begin() + offset);
    offset += s.mask.numel();
  }
  return out;
}

// Evaluates adapted parameters on an episode's query set: foreground
// probability is softmax channel 1 of the forward logits.
template <typename T>
EvalRecord episode_eval(const ModelSpec& spec, const ParamSet<T>& adapted,
                        const Episode<T>& episode, double lo_thresh = 0.35,
                        double hi_thresh = 0.5) {
  check_arg(!episode.query.empty(), "episode_eval: episode has no query set");
  NoGradGuard ng;
  Tensor<T> images = stack_images(episode.query);
  Tensor<T> targets = stack_masks(episode.query);
  Tensor<T> logits = forward(spec, adapted, images);
  const double loss = static_cast<double>(softmax_cross_entropy(logits, targets).item());
  Tensor<T> prob = softmax_channel(logits);
  // channel 1 of [Q,2,H,W] -> [Q,H,W]
  const int64_t q = prob.dim(0), c = prob.dim(1), hw = prob.dim(2) * prob.dim(3);
  Tensor<T> fg = Tensor<T>::uninit({q, prob.dim(2), prob.dim(3)});
  for (int64_t i = 0; i < q; ++i)
    std::copy_n(prob.data().data() + (i * c + 1) * hw, hw, fg.raw().data() + i * hw);
  EvalRecord rec = eval_from_probs(fg, targets, loss, lo_thresh, hi_thresh);
  rec.episode_id = episode.class_id;
  return rec;
}

}  // namespace metadrn
