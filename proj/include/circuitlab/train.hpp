#pragma once

// Adam optimizer and the toy-model training loop. Training is fully
// deterministic given (model init seed, data, trainer seed): batches are
// drawn with the library's own RNG and parameters are updated in the fixed
// traversal order Model::parameters() defines.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "circuitlab/common.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/tensor.hpp"

namespace circuitlab {

// ===== optimizer ============================================================

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamSettings settings = {})
      : params_(std::move(params)), s_(settings) {
    require(s_.lr >= 0, "Adam: learning rate must be non-negative");
    require(s_.beta1 >= 0 && s_.beta1 < 1 && s_.beta2 >= 0 && s_.beta2 < 1,
            "Adam: beta coefficients must lie in [0, 1)");
    for (Tensor* p : params_) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }

  void zero_grad() {
    for (Tensor* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(s_.beta1, t_);
    double bc2 = 1.0 - std::pow(s_.beta2, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor* p = params_[i];
      if (!p->has_grad()) continue;
      const std::vector<double>& g = p->grad();
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      std::vector<double>& x = p->data();
      for (size_t j = 0; j < x.size(); ++j) {
        m[j] = s_.beta1 * m[j] + (1.0 - s_.beta1) * g[j];
        v[j] = s_.beta2 * v[j] + (1.0 - s_.beta2) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        x[j] -= s_.lr * mhat / (std::sqrt(vhat) + s_.eps);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  AdamSettings s_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

// ===== evaluation ===========================================================

// Fraction of instances whose greedy final-position prediction equals the
// stored answer token.
inline double accuracy(const Model& model, const std::vector<TaskInstance>& instances,
                       size_t limit = 0) {
  require(!instances.empty(), "accuracy: empty instance list");
  size_t n = limit == 0 ? instances.size() : std::min(limit, instances.size());
  size_t hits = 0;
  for (size_t i = 0; i < n; ++i) {
    Tensor logits = forward_logits(model, instances[i].tokens);
    if (greedy_token(logits) == instances[i].answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// ===== training loop ========================================================

struct TrainSettings {
  AdamSettings adam{3e-3, 0.9, 0.999, 1e-8};
  int batch_size = 16;
  int max_steps = 20000;
  int eval_every = 200;       // validation cadence (steps)
  size_t eval_sample = 500;   // cap on instances per accuracy evaluation
  double target_val_accuracy = 0.9;
  bool require_target = true;  // throw if the target is not reached
  uint64_t seed = 1;
  // Optional progress sink (step, loss, last validation accuracy or -1).
  std::function<void(int, double, double)> on_progress;
};

struct TrainReport {
  int steps = 0;
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  bool reached_target = false;
};

struct TrainedModel {
  Model model;
  TrainReport report;
};

inline TrainedModel train_toy_model(const ModelConfig& config, const DatasetSplit& data,
                                    const TrainSettings& settings = {}) {
  require(!data.train.empty(), "train_toy_model: dataset has no training instances");
  require(!data.validation.empty(), "train_toy_model: dataset has no validation instances");
  require(settings.batch_size >= 1, "train_toy_model: batch_size must be >= 1");
  require(settings.max_steps >= 0, "train_toy_model: max_steps must be >= 0");
  require(config.vocab_size >= data.vocab_size,
          "train_toy_model: model vocab_size " + std::to_string(config.vocab_size) +
              " smaller than task vocabulary " + std::to_string(data.vocab_size));
  for (const TaskInstance& inst : data.train) {
    require(static_cast<int>(inst.tokens.size()) <= config.max_seq_len,
            "train_toy_model: instance length " + std::to_string(inst.tokens.size()) +
                " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }

  Model model = Model::init(config);
  model.set_requires_grad(true);
  Adam opt(model.parameters(), settings.adam);
  Rng rng(settings.seed);

  TrainReport report;
  double last_val = -1.0;
  bool stop = false;
  for (int step = 0; step < settings.max_steps && !stop; ++step) {
    Tape tape;
    TapeScope scope(tape);
    double loss_value;
    try {
      Tensor total;
      for (int b = 0; b < settings.batch_size; ++b) {
        const TaskInstance& inst = data.train[rng.below(data.train.size())];
        Tensor logits = run_forward(model, inst.tokens).logits;
        int T = logits.dim(0);
        Tensor last_row = reshape(slice(logits, 0, T - 1, 1), {logits.dim(1)});
        Tensor ce = cross_entropy_with_logits(last_row, inst.answer);
        total = total.defined() ? add(total, ce) : ce;
      }
      Tensor loss = scale(total, 1.0 / settings.batch_size);
      loss_value = loss.data()[0];
      if (!std::isfinite(loss_value)) {
        throw NumericError("non-finite loss");
      }
      opt.zero_grad();
      backward(tape, loss);
    } catch (const NumericError& e) {
      throw NumericError("train_toy_model: training diverged at step " +
                         std::to_string(step) + " (" + e.what() + ")");
    }
    opt.step();
    report.steps = step + 1;
    report.final_loss = loss_value;

    bool at_eval = (step + 1) % settings.eval_every == 0 || step + 1 == settings.max_steps;
    if (at_eval) {
      last_val = accuracy(model, data.validation, settings.eval_sample);
      if (last_val >= settings.target_val_accuracy) stop = true;
    }
    if (settings.on_progress) settings.on_progress(step + 1, loss_value, last_val);
  }

  model.set_requires_grad(false);
  report.val_accuracy =
      last_val >= 0 ? last_val : accuracy(model, data.validation, settings.eval_sample);
  report.train_accuracy = accuracy(model, data.train, settings.eval_sample);
  report.reached_target = report.val_accuracy >= settings.target_val_accuracy;
  if (settings.require_target && !report.reached_target) {
    throw NumericError("train_toy_model: validation accuracy " +
                       std::to_string(report.val_accuracy) + " after " +
                       std::to_string(report.steps) + " steps is below the target " +
                       std::to_string(settings.target_val_accuracy));
  }
  return TrainedModel{std::move(model), report};
}

}  // namespace circuitlab
