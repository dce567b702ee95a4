#ifndef VITAE_CONFIG_HPP_
#define VITAE_CONFIG_HPP_

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitae/data.hpp"
#include "vitae/ops.hpp"

namespace vitae {

enum class Fusion { pre, post };
enum class ParallelBranch { pcm, prm };

// One reduction cell: pyramid reduction (strided convs over a dilation set,
// channel-concatenated), attention over the flattened map, a parallel conv
// branch with the same total downsampling, and an FFN.
struct RCConfig {
  int in_channels = 0;
  int branch_channels = 0;          // output channels of each dilation branch
  std::vector<int> dilation_set;    // one conv per entry
  int stride = 1;                   // total spatial reduction of the cell
  int kernel = 3;                   // PRM kernel (odd)
  int out_channels = 0;             // must equal |dilations| * branch_channels
  bool pcm_enabled = true;
  std::array<int, 3> pcm_strides{1, 1, 1};  // product must equal stride
  Fusion fusion = Fusion::pre;
  bool pcm_bn = true;
  bool pcm_extra_bn = false;
  Act pcm_activation = Act::silu;
  ParallelBranch parallel_branch = ParallelBranch::pcm;
  Act prm_activation = Act::gelu;
  int heads = 1;
  double ffn_ratio = 2.0;

  int cell_dim() const { return int(dilation_set.size()) * branch_channels; }
  void validate(const std::string& where) const;
};

struct NCConfig {
  int embed_dim = 0;
  int heads = 1;
  double ffn_ratio = 2.0;
  int pcm_groups = 1;
  Fusion fusion = Fusion::pre;
  bool pcm_bn = true;
  bool pcm_extra_bn = false;
  Act pcm_activation = Act::silu;
  bool pcm_enabled = true;

  void validate(const std::string& where) const;
};

struct ModelConfig {
  int in_h = 224, in_w = 224, in_c = 3;
  std::vector<RCConfig> rcs;
  NCConfig nc;          // all normal cells share one config
  int nc_cells = 1;
  int num_classes = 1000;
  bool use_pos_embedding = true;
  uint64_t seed = 0;

  int total_stride() const;
  void validate() const;
};

// Compiled-in variants. "vitae-t" / "vitae-s" follow the published model
// table; "vitae-micro" is the smallest legal config (1 RC, 1 NC, embed 8).
ModelConfig preset_model(const std::string& name);
bool is_preset_name(const std::string& name);

struct TrainConfig {
  int epochs = 1;
  int batch_size = 32;
  double base_lr = 5e-4;
  int warmup_epochs = -1;  // -1: 5% of epochs, rounded
  double weight_decay = 0.05;
  double min_lr = 1e-6;
  double data_fraction = 1.0;
  uint64_t seed = 0;
  std::string dtype = "float32";  // float32 | float64

  void validate() const;
  int resolved_warmup_epochs() const;
};

struct IdxPathsConfig {
  std::string train_images, train_labels, val_images, val_labels;
};

struct SyntheticDataConfig {
  SyntheticSpec spec;              // training split
  int val_samples_per_class = 0;   // validation split (seed+1); 0 = none
};

struct DataSourceConfig {
  std::optional<SyntheticDataConfig> synthetic;
  std::optional<IdxPathsConfig> idx;
  void validate() const;
};

struct CliConfig {
  ModelConfig model;
  TrainConfig train;
  DataSourceConfig data;
  std::string output_dir = "out";
};

// JSON (de)serialization. Unknown fields are rejected with the offending
// field path so config typos fail loudly.
ModelConfig model_config_from_json(const nlohmann::json& j,
                                   const std::string& where = "model");
nlohmann::json model_config_to_json(const ModelConfig& cfg);

TrainConfig train_config_from_json(const nlohmann::json& j,
                                   const std::string& where = "train");
nlohmann::json train_config_to_json(const TrainConfig& cfg);

DataSourceConfig data_config_from_json(const nlohmann::json& j,
                                       const std::string& where = "data");
nlohmann::json data_config_to_json(const DataSourceConfig& cfg);

CliConfig cli_config_from_json(const nlohmann::json& j);
nlohmann::json cli_config_to_json(const CliConfig& cfg);
CliConfig load_cli_config(const std::string& path);

const char* act_name(Act a);
Act act_from_name(const std::string& s, const std::string& where);

}  // namespace vitae

#endif
