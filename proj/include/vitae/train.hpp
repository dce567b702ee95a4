#ifndef VITAE_TRAIN_HPP_
#define VITAE_TRAIN_HPP_

#include <string>
#include <vector>

#include "vitae/config.hpp"
#include "vitae/data.hpp"
#include "vitae/model.hpp"
#include "vitae/optim.hpp"

namespace vitae {

struct EpochMetrics {
  int epoch = 0;
  int64_t step = 0;
  double lr = 0, train_loss = 0, val_loss = 0, val_top1 = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  bool diverged = false;
  std::string last_checkpoint;

  double final_val_top1() const {
    return history.empty() ? 0.0 : history.back().val_top1;
  }
  double final_train_loss() const {
    return history.empty() ? 0.0 : history.back().train_loss;
  }
};

struct EvalResult {
  double top1 = 0, loss = 0;
};

// Deterministic training loop: seed fixes the shuffle order and (through the
// model seed) the initialization, so two runs emit identical metrics.
// Divergence (non-finite loss) aborts, retaining the last epoch checkpoint.
// When output_dir is non-empty, metrics.csv and ckpt_epochN.vtae are written
// there. The effective learning rate is base_lr * batch_size / 512.
template <typename T>
TrainResult train(Model<T>& model, const TrainConfig& tc,
                  const Dataset& train_ds, const Dataset& val_ds,
                  const std::string& output_dir);

template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& ds, int batch_size);

void write_metrics_csv(const std::string& path,
                       const std::vector<EpochMetrics>& history);

}  // namespace vitae

#endif
