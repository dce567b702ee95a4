#ifndef VITAE_DATA_HPP_
#define VITAE_DATA_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "vitae/tensor.hpp"

namespace vitae {

// Labeled image collection. Pixel values are float32 in [0,1] before
// normalization; `mean`/`std` hold the per-channel normalization applied when
// batches are materialized.
struct Dataset {
  int64_t n = 0, c = 0, h = 0, w = 0;
  std::vector<float> images;  // [n,c,h,w] row-major
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::vector<float> mean, std;  // per channel

  int num_classes() const;
  // Computes per-channel mean/std from the stored images.
  void compute_normalization();
};

// Synthetic scale-variance dataset: one of {disk, square, triangle} per
// image, drawn at a uniformly random scale and position.
struct SyntheticSpec {
  int canvas = 64;
  int samples_per_class = 100;
  double min_frac = 0.2;
  double max_frac = 0.9;
  double noise_std = 0.0;
  uint64_t seed = 0;

  static constexpr int kNumClasses = 3;
  void validate() const;
};

// Big-endian IDX ingestion (magic 0x00000803 images / 0x00000801 labels).
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// IDX export of a dataset (u8 quantization); single-channel only.
void write_idx(const Dataset& ds, const std::string& images_path,
               const std::string& labels_path);

Dataset gen_synthetic(const SyntheticSpec& spec);

// Index plan for one epoch: the subset is the first floor(fraction*N) entries
// of a permutation derived from `seed` alone (so membership is
// epoch-independent); the per-epoch order reshuffles with (seed, epoch).
std::vector<std::vector<int>> batch_plan(int64_t n, int64_t batch_size,
                                         uint64_t seed, int64_t epoch,
                                         double fraction);

template <typename T>
struct Batch {
  Tensor<T> images;  // [B,C,H,W], normalized
  std::vector<int> labels;
};

// Materializes the given sample indices as a normalized tensor batch.
template <typename T>
Batch<T> make_batch(const Dataset& ds, const std::vector<int>& indices);

// Inverse of the per-channel normalization (for tests / inspection).
template <typename T>
void denormalize(const Dataset& ds, Tensor<T>& images);

}  // namespace vitae

#endif
