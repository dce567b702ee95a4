#ifndef VITAE_CHECKPOINT_HPP_
#define VITAE_CHECKPOINT_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vitae/model.hpp"
#include "vitae/optim.hpp"

namespace vitae {

// On-disk layout: "VTAE" magic, u32 version (=1), u32 header length, UTF-8
// JSON header (model config, epoch, rng state, optimizer step, tensor
// directory), raw little-endian tensor payloads in directory order, u32
// CRC32 of the payload bytes.
template <typename T>
struct Checkpoint {
  ModelConfig config;
  int64_t epoch = 0;
  uint64_t rng_state = 0;
  int64_t opt_step = 0;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& kv : tensors)
      if (kv.first == name) return &kv.second;
    return nullptr;
  }
};

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model,
                     const OptimizerState<T>* opt, int64_t epoch,
                     uint64_t rng_state);

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path);

// Copies checkpoint tensors into a built model; every model parameter must be
// present with an identical shape.
template <typename T>
void restore_model(Model<T>& model, const Checkpoint<T>& ckpt);

template <typename T>
void restore_optimizer(OptimizerState<T>& opt, const Checkpoint<T>& ckpt);

uint32_t crc32(const unsigned char* data, size_t len);

}  // namespace vitae

#endif
