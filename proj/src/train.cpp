#include "vitae/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vitae/checkpoint.hpp"
#include "vitae/error.hpp"

namespace vitae {

void write_metrics_csv(const std::string& path,
                       const std::vector<EpochMetrics>& history) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for write");
  f << "epoch,step,lr,train_loss,val_loss,val_top1\n";
  char buf[256];
  for (const auto& m : history) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%.9g,%.9g,%.9g,%.9g\n", m.epoch,
                  static_cast<long long>(m.step), m.lr, m.train_loss,
                  m.val_loss, m.val_top1);
    f << buf;
  }
}

template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& ds, int batch_size) {
  if (ds.n < 1) throw DataError("evaluate: empty dataset");
  bool was_training = model.training;
  model.set_training(false);
  Graph<T> g;
  typename Graph<T>::NoGrad guard(g);
  int64_t correct = 0;
  double loss_sum = 0;
  for (int64_t start = 0; start < ds.n; start += batch_size) {
    int64_t end = std::min<int64_t>(ds.n, start + batch_size);
    std::vector<int> idx;
    for (int64_t i = start; i < end; ++i) idx.push_back(int(i));
    Batch<T> batch = make_batch<T>(ds, idx);
    Tensor<T> logits = model_forward(g, model, batch.images);
    int64_t k = logits.dim(1);
    for (int64_t i = 0; i < end - start; ++i) {
      const T* row = logits.data() + i * k;
      int64_t arg = 0;
      for (int64_t j = 1; j < k; ++j)
        if (row[j] > row[arg]) arg = j;
      if (int(arg) == batch.labels[size_t(i)]) ++correct;
    }
    Tensor<T> loss = cross_entropy(g, logits, batch.labels);
    loss_sum += double(loss.value()) * double(end - start);
  }
  model.set_training(was_training);
  return {double(correct) / double(ds.n), loss_sum / double(ds.n)};
}

template <typename T>
TrainResult train(Model<T>& model, const TrainConfig& tc,
                  const Dataset& train_ds, const Dataset& val_ds,
                  const std::string& output_dir) {
  tc.validate();
  if (train_ds.n < 1) throw DataError("train: empty dataset");
  if (!output_dir.empty()) std::filesystem::create_directories(output_dir);

  TrainResult result;
  OptimizerState<T> opt = OptimizerState<T>::init(model.params, tc.weight_decay);
  Rng rng(tc.seed);

  auto plan0 = batch_plan(train_ds.n, tc.batch_size, tc.seed, 0,
                          tc.data_fraction);
  int64_t steps_per_epoch = int64_t(plan0.size());
  int64_t total_steps = steps_per_epoch * tc.epochs;
  int64_t warmup_steps = steps_per_epoch * tc.resolved_warmup_epochs();
  double eff_lr = tc.base_lr * double(tc.batch_size) / 512.0;

  Graph<T> g;
  int64_t global_step = 0;
  double lr = 0;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    auto plan = batch_plan(train_ds.n, tc.batch_size, tc.seed, epoch - 1,
                           tc.data_fraction);
    model.set_training(true);
    double loss_sum = 0;
    int64_t sample_count = 0;
    for (const auto& idx : plan) {
      g.clear();
      model.params.zero_grads();
      Batch<T> batch = make_batch<T>(train_ds, idx);
      Tensor<T> logits = model_forward(g, model, batch.images);
      Tensor<T> loss = cross_entropy(g, logits, batch.labels);
      double lv = double(loss.value());
      if (!std::isfinite(lv)) {
        result.diverged = true;
        g.clear();
        if (!output_dir.empty())
          write_metrics_csv(output_dir + "/metrics.csv", result.history);
        return result;
      }
      loss_sum += lv * double(idx.size());
      sample_count += int64_t(idx.size());
      g.backward(loss);
      lr = cosine_lr(global_step + 1, total_steps, eff_lr, tc.min_lr,
                     warmup_steps);
      adamw_step(model.params, opt, lr);
      ++global_step;
    }
    g.clear();

    EpochMetrics m;
    m.epoch = epoch;
    m.step = global_step;
    m.lr = lr;
    m.train_loss = loss_sum / double(sample_count);
    EvalResult ev = evaluate(model, val_ds, tc.batch_size);
    m.val_loss = ev.loss;
    m.val_top1 = ev.top1;
    result.history.push_back(m);

    if (!output_dir.empty()) {
      std::string ckpt =
          output_dir + "/ckpt_epoch" + std::to_string(epoch) + ".vtae";
      save_checkpoint(ckpt, model, &opt, epoch, rng.state());
      result.last_checkpoint = ckpt;
      write_metrics_csv(output_dir + "/metrics.csv", result.history);
    }
  }
  return result;
}

template TrainResult train<float>(Model<float>&, const TrainConfig&,
                                  const Dataset&, const Dataset&,
                                  const std::string&);
template TrainResult train<double>(Model<double>&, const TrainConfig&,
                                   const Dataset&, const Dataset&,
                                   const std::string&);
template EvalResult evaluate<float>(Model<float>&, const Dataset&, int);
template EvalResult evaluate<double>(Model<double>&, const Dataset&, int);

}  // namespace vitae
