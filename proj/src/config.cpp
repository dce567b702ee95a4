#include "vitae/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "vitae/error.hpp"

namespace vitae {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  if (!j.is_object())
    throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError(where + "." + it.key() + ": unknown field");
}

template <typename V>
void get_to(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

Fusion fusion_from(const std::string& s, const std::string& where) {
  if (s == "pre") return Fusion::pre;
  if (s == "post") return Fusion::post;
  throw ConfigError(where + ": fusion must be \"pre\" or \"post\"");
}

const char* fusion_name(Fusion f) { return f == Fusion::pre ? "pre" : "post"; }

ParallelBranch branch_from(const std::string& s, const std::string& where) {
  if (s == "pcm") return ParallelBranch::pcm;
  if (s == "prm") return ParallelBranch::prm;
  throw ConfigError(where + ": parallel_branch must be \"pcm\" or \"prm\"");
}

}  // namespace

const char* act_name(Act a) {
  switch (a) {
    case Act::silu: return "silu";
    case Act::gelu: return "gelu";
    case Act::relu: return "relu";
    case Act::none: return "none";
  }
  return "none";
}

Act act_from_name(const std::string& s, const std::string& where) {
  if (s == "silu") return Act::silu;
  if (s == "gelu") return Act::gelu;
  if (s == "relu") return Act::relu;
  if (s == "none") return Act::none;
  throw ConfigError(where + ": unknown activation \"" + s + "\"");
}

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

void RCConfig::validate(const std::string& where) const {
  if (in_channels < 1) throw ConfigError(where + ": in_channels must be >= 1");
  if (branch_channels < 1)
    throw ConfigError(where + ": branch_channels must be >= 1");
  if (dilation_set.empty())
    throw ConfigError(where + ": dilation_set must have >= 1 entry");
  for (int d : dilation_set)
    if (d < 1) throw ConfigError(where + ": dilation rates must be >= 1");
  if (stride < 1) throw ConfigError(where + ": stride must be >= 1");
  if (kernel < 1 || kernel % 2 == 0)
    throw ConfigError(where + ": kernel must be odd (branch alignment)");
  if (out_channels != cell_dim())
    throw ConfigError(where + ": out_channels must equal |dilation_set| * "
                              "branch_channels = " +
                      std::to_string(cell_dim()));
  if (heads < 1 || cell_dim() % heads != 0)
    throw ConfigError(where + ": cell dim " + std::to_string(cell_dim()) +
                      " not divisible by heads " + std::to_string(heads));
  int prod = 1;
  for (int s : pcm_strides) {
    if (s < 1) throw ConfigError(where + ": pcm_strides must be >= 1");
    prod *= s;
  }
  if (prod != stride)
    throw ConfigError(where + ": product(pcm_strides) = " +
                      std::to_string(prod) + " must equal stride " +
                      std::to_string(stride));
  if (!(ffn_ratio > 0)) throw ConfigError(where + ": ffn_ratio must be > 0");
}

void NCConfig::validate(const std::string& where) const {
  if (embed_dim < 1) throw ConfigError(where + ": embed_dim must be >= 1");
  if (heads < 1 || embed_dim % heads != 0)
    throw ConfigError(where + ": embed_dim " + std::to_string(embed_dim) +
                      " not divisible by heads " + std::to_string(heads));
  if (pcm_groups < 1 || embed_dim % pcm_groups != 0)
    throw ConfigError(where + ": embed_dim " + std::to_string(embed_dim) +
                      " not divisible by pcm_groups " +
                      std::to_string(pcm_groups));
  if (!(ffn_ratio > 0)) throw ConfigError(where + ": ffn_ratio must be > 0");
}

int ModelConfig::total_stride() const {
  int s = 1;
  for (const auto& rc : rcs) s *= rc.stride;
  return s;
}

void ModelConfig::validate() const {
  if (in_h < 1 || in_w < 1 || in_c < 1)
    throw ConfigError("model: input_size entries must be >= 1");
  if (rcs.empty()) throw ConfigError("model: at least one reduction cell");
  for (size_t i = 0; i < rcs.size(); ++i) {
    std::string where = "model.rcs[" + std::to_string(i) + "]";
    rcs[i].validate(where);
    int expect_in = i == 0 ? in_c : rcs[i - 1].out_channels;
    if (rcs[i].in_channels != expect_in)
      throw ConfigError(where + ": in_channels " +
                        std::to_string(rcs[i].in_channels) +
                        " must equal previous cell output " +
                        std::to_string(expect_in));
  }
  int ts = total_stride();
  if (in_h % ts != 0 || in_w % ts != 0)
    throw ConfigError("model: input " + std::to_string(in_h) + "x" +
                      std::to_string(in_w) + " must be divisible by total "
                      "stride " + std::to_string(ts));
  nc.validate("model.nc");
  if (rcs.back().out_channels != nc.embed_dim)
    throw ConfigError("model: last RC out_channels " +
                      std::to_string(rcs.back().out_channels) +
                      " must equal NC embed_dim " +
                      std::to_string(nc.embed_dim));
  if (nc_cells < 1) throw ConfigError("model: nc_cells must be >= 1");
  if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs: must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (!(base_lr > 0)) throw ConfigError("train.base_lr: must be > 0");
  if (!(data_fraction > 0.0 && data_fraction <= 1.0))
    throw ConfigError("train.data_fraction: must lie in (0, 1]");
  if (dtype != "float32" && dtype != "float64")
    throw ConfigError("train.dtype: must be \"float32\" or \"float64\"");
  if (resolved_warmup_epochs() >= epochs)
    throw ConfigError("train.warmup_epochs: must be < epochs");
  if (weight_decay < 0) throw ConfigError("train.weight_decay: must be >= 0");
  if (min_lr < 0) throw ConfigError("train.min_lr: must be >= 0");
}

int TrainConfig::resolved_warmup_epochs() const {
  if (warmup_epochs >= 0) return warmup_epochs;
  return int(std::lround(0.05 * epochs));
}

void SyntheticSpec::validate() const {
  if (canvas < 4) throw ConfigError("synthetic.canvas: must be >= 4");
  if (samples_per_class < 1)
    throw ConfigError("synthetic.samples_per_class: must be >= 1");
  if (!(min_frac > 0.0 && min_frac < max_frac && max_frac <= 1.0))
    throw ConfigError("synthetic.scale_range: need 0 < min < max <= 1");
  if (min_frac * canvas < 2.0)
    throw ConfigError("synthetic.scale_range: shapes smaller than 2px at min "
                      "scale cannot be rasterized");
  if (noise_std < 0) throw ConfigError("synthetic.noise_std: must be >= 0");
}

void DataSourceConfig::validate() const {
  int sources = int(bool(synthetic)) + int(bool(idx));
  if (sources != 1)
    throw ConfigError("data: exactly one source (synthetic or idx) required");
  if (synthetic) {
    synthetic->spec.validate();
    if (synthetic->val_samples_per_class < 1)
      throw ConfigError("data.synthetic.val_samples_per_class: must be >= 1");
  }
  if (idx) {
    if (idx->train_images.empty() || idx->train_labels.empty() ||
        idx->val_images.empty() || idx->val_labels.empty())
      throw ConfigError("data.idx: all four paths are required");
  }
}

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

namespace {

RCConfig make_rc(int in, int branch, std::vector<int> dils, int stride,
                 int kernel, std::array<int, 3> pcm_strides, int heads) {
  RCConfig rc;
  rc.in_channels = in;
  rc.branch_channels = branch;
  rc.dilation_set = std::move(dils);
  rc.stride = stride;
  rc.kernel = kernel;
  rc.out_channels = rc.cell_dim();
  rc.pcm_strides = pcm_strides;
  rc.heads = heads;
  return rc;
}

ModelConfig make_vitae_t() {
  ModelConfig m;
  m.in_h = m.in_w = 224;
  m.in_c = 3;
  m.rcs = {make_rc(3, 16, {1, 2, 3, 4}, 4, 7, {2, 2, 1}, 1),
           make_rc(64, 21, {1, 2, 3}, 2, 3, {2, 1, 1}, 1),
           make_rc(63, 128, {1, 2}, 2, 3, {2, 1, 1}, 1)};
  m.nc.embed_dim = 256;
  m.nc.heads = 4;
  m.nc.ffn_ratio = 2.0;
  m.nc.pcm_groups = 64;
  m.nc_cells = 7;
  m.num_classes = 1000;
  return m;
}

ModelConfig make_vitae_s() {
  ModelConfig m = make_vitae_t();
  m.rcs[2] = make_rc(63, 192, {1, 2}, 2, 3, {2, 1, 1}, 1);
  m.nc.embed_dim = 384;
  m.nc.heads = 6;
  m.nc.ffn_ratio = 3.0;
  m.nc.pcm_groups = 64;
  m.nc_cells = 14;
  return m;
}

ModelConfig make_vitae_micro() {
  ModelConfig m;
  m.in_h = m.in_w = 16;
  m.in_c = 1;
  m.rcs = {make_rc(1, 4, {1, 2}, 4, 7, {2, 2, 1}, 2)};
  m.nc.embed_dim = 8;
  m.nc.heads = 2;
  m.nc.ffn_ratio = 2.0;
  m.nc.pcm_groups = 2;
  m.nc_cells = 1;
  m.num_classes = 10;
  return m;
}

}  // namespace

bool is_preset_name(const std::string& name) {
  return name == "vitae-t" || name == "vitae-s" || name == "vitae-micro";
}

ModelConfig preset_model(const std::string& name) {
  if (name == "vitae-t") return make_vitae_t();
  if (name == "vitae-s") return make_vitae_s();
  if (name == "vitae-micro") return make_vitae_micro();
  throw ConfigError("unknown preset \"" + name +
                    "\" (known: vitae-t, vitae-s, vitae-micro)");
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace {

RCConfig rc_from_json(const json& j, const std::string& where) {
  reject_unknown(j,
                 {"in_channels", "branch_channels", "dilations", "stride",
                  "kernel", "out_channels", "pcm_enabled", "pcm_strides",
                  "fusion", "pcm_bn", "pcm_extra_bn", "pcm_activation",
                  "parallel_branch", "prm_activation", "heads", "ffn_ratio"},
                 where);
  RCConfig rc;
  get_to(j, "in_channels", rc.in_channels, where);
  get_to(j, "branch_channels", rc.branch_channels, where);
  get_to(j, "dilations", rc.dilation_set, where);
  get_to(j, "stride", rc.stride, where);
  get_to(j, "kernel", rc.kernel, where);
  if (j.contains("out_channels"))
    get_to(j, "out_channels", rc.out_channels, where);
  else
    rc.out_channels = rc.cell_dim();
  get_to(j, "pcm_enabled", rc.pcm_enabled, where);
  if (j.contains("pcm_strides")) {
    std::vector<int> s;
    get_to(j, "pcm_strides", s, where);
    if (s.size() != 3)
      throw ConfigError(where + ".pcm_strides: expected 3 entries");
    rc.pcm_strides = {s[0], s[1], s[2]};
  }
  if (j.contains("fusion"))
    rc.fusion = fusion_from(j.at("fusion").get<std::string>(), where);
  get_to(j, "pcm_bn", rc.pcm_bn, where);
  get_to(j, "pcm_extra_bn", rc.pcm_extra_bn, where);
  if (j.contains("pcm_activation"))
    rc.pcm_activation =
        act_from_name(j.at("pcm_activation").get<std::string>(), where);
  if (j.contains("parallel_branch"))
    rc.parallel_branch =
        branch_from(j.at("parallel_branch").get<std::string>(), where);
  if (j.contains("prm_activation"))
    rc.prm_activation =
        act_from_name(j.at("prm_activation").get<std::string>(), where);
  get_to(j, "heads", rc.heads, where);
  get_to(j, "ffn_ratio", rc.ffn_ratio, where);
  return rc;
}

json rc_to_json(const RCConfig& rc) {
  json j;
  j["in_channels"] = rc.in_channels;
  j["branch_channels"] = rc.branch_channels;
  j["dilations"] = rc.dilation_set;
  j["stride"] = rc.stride;
  j["kernel"] = rc.kernel;
  j["out_channels"] = rc.out_channels;
  j["pcm_enabled"] = rc.pcm_enabled;
  j["pcm_strides"] = std::vector<int>(rc.pcm_strides.begin(),
                                      rc.pcm_strides.end());
  j["fusion"] = fusion_name(rc.fusion);
  j["pcm_bn"] = rc.pcm_bn;
  j["pcm_extra_bn"] = rc.pcm_extra_bn;
  j["pcm_activation"] = act_name(rc.pcm_activation);
  j["parallel_branch"] = rc.parallel_branch == ParallelBranch::pcm ? "pcm"
                                                                   : "prm";
  j["prm_activation"] = act_name(rc.prm_activation);
  j["heads"] = rc.heads;
  j["ffn_ratio"] = rc.ffn_ratio;
  return j;
}

NCConfig nc_from_json(const json& j, const std::string& where) {
  reject_unknown(j,
                 {"embed_dim", "heads", "ffn_ratio", "pcm_groups", "fusion",
                  "pcm_bn", "pcm_extra_bn", "pcm_activation", "pcm_enabled"},
                 where);
  NCConfig nc;
  get_to(j, "embed_dim", nc.embed_dim, where);
  get_to(j, "heads", nc.heads, where);
  get_to(j, "ffn_ratio", nc.ffn_ratio, where);
  get_to(j, "pcm_groups", nc.pcm_groups, where);
  if (j.contains("fusion"))
    nc.fusion = fusion_from(j.at("fusion").get<std::string>(), where);
  get_to(j, "pcm_bn", nc.pcm_bn, where);
  get_to(j, "pcm_extra_bn", nc.pcm_extra_bn, where);
  if (j.contains("pcm_activation"))
    nc.pcm_activation =
        act_from_name(j.at("pcm_activation").get<std::string>(), where);
  get_to(j, "pcm_enabled", nc.pcm_enabled, where);
  return nc;
}

json nc_to_json(const NCConfig& nc) {
  json j;
  j["embed_dim"] = nc.embed_dim;
  j["heads"] = nc.heads;
  j["ffn_ratio"] = nc.ffn_ratio;
  j["pcm_groups"] = nc.pcm_groups;
  j["fusion"] = fusion_name(nc.fusion);
  j["pcm_bn"] = nc.pcm_bn;
  j["pcm_extra_bn"] = nc.pcm_extra_bn;
  j["pcm_activation"] = act_name(nc.pcm_activation);
  j["pcm_enabled"] = nc.pcm_enabled;
  return j;
}

}  // namespace

ModelConfig model_config_from_json(const json& j, const std::string& where) {
  reject_unknown(j,
                 {"preset", "input_size", "num_classes", "use_pos_embedding",
                  "seed", "rcs", "nc", "nc_cells"},
                 where);
  ModelConfig cfg;
  if (j.contains("preset")) {
    cfg = preset_model(j.at("preset").get<std::string>());
  } else if (!j.contains("rcs") || !j.contains("nc")) {
    throw ConfigError(where + ": either preset or full rcs/nc spec required");
  }
  if (j.contains("input_size")) {
    std::vector<int> sz;
    get_to(j, "input_size", sz, where);
    if (sz.size() != 3)
      throw ConfigError(where + ".input_size: expected [H, W, C]");
    cfg.in_h = sz[0];
    cfg.in_w = sz[1];
    cfg.in_c = sz[2];
    if (!cfg.rcs.empty()) cfg.rcs.front().in_channels = sz[2];
  }
  get_to(j, "num_classes", cfg.num_classes, where);
  get_to(j, "use_pos_embedding", cfg.use_pos_embedding, where);
  get_to(j, "seed", cfg.seed, where);
  if (j.contains("rcs")) {
    cfg.rcs.clear();
    const json& arr = j.at("rcs");
    if (!arr.is_array()) throw ConfigError(where + ".rcs: expected an array");
    for (size_t i = 0; i < arr.size(); ++i)
      cfg.rcs.push_back(
          rc_from_json(arr[i], where + ".rcs[" + std::to_string(i) + "]"));
  }
  if (j.contains("nc")) cfg.nc = nc_from_json(j.at("nc"), where + ".nc");
  get_to(j, "nc_cells", cfg.nc_cells, where);
  cfg.validate();
  return cfg;
}

json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["input_size"] = std::vector<int>{cfg.in_h, cfg.in_w, cfg.in_c};
  j["num_classes"] = cfg.num_classes;
  j["use_pos_embedding"] = cfg.use_pos_embedding;
  j["seed"] = cfg.seed;
  json rcs = json::array();
  for (const auto& rc : cfg.rcs) rcs.push_back(rc_to_json(rc));
  j["rcs"] = rcs;
  j["nc"] = nc_to_json(cfg.nc);
  j["nc_cells"] = cfg.nc_cells;
  return j;
}

TrainConfig train_config_from_json(const json& j, const std::string& where) {
  reject_unknown(j,
                 {"epochs", "batch_size", "base_lr", "warmup_epochs",
                  "weight_decay", "min_lr", "data_fraction", "seed", "dtype"},
                 where);
  TrainConfig cfg;
  get_to(j, "epochs", cfg.epochs, where);
  get_to(j, "batch_size", cfg.batch_size, where);
  get_to(j, "base_lr", cfg.base_lr, where);
  get_to(j, "warmup_epochs", cfg.warmup_epochs, where);
  get_to(j, "weight_decay", cfg.weight_decay, where);
  get_to(j, "min_lr", cfg.min_lr, where);
  get_to(j, "data_fraction", cfg.data_fraction, where);
  get_to(j, "seed", cfg.seed, where);
  get_to(j, "dtype", cfg.dtype, where);
  cfg.validate();
  return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["base_lr"] = cfg.base_lr;
  j["warmup_epochs"] = cfg.warmup_epochs;
  j["weight_decay"] = cfg.weight_decay;
  j["min_lr"] = cfg.min_lr;
  j["data_fraction"] = cfg.data_fraction;
  j["seed"] = cfg.seed;
  j["dtype"] = cfg.dtype;
  return j;
}

DataSourceConfig data_config_from_json(const json& j,
                                       const std::string& where) {
  reject_unknown(j, {"synthetic", "idx"}, where);
  DataSourceConfig cfg;
  if (j.contains("synthetic")) {
    const json& s = j.at("synthetic");
    std::string w = where + ".synthetic";
    reject_unknown(s,
                   {"canvas", "samples_per_class", "val_samples_per_class",
                    "scale_range", "noise_std", "seed"},
                   w);
    SyntheticDataConfig sd;
    get_to(s, "canvas", sd.spec.canvas, w);
    get_to(s, "samples_per_class", sd.spec.samples_per_class, w);
    get_to(s, "val_samples_per_class", sd.val_samples_per_class, w);
    if (s.contains("scale_range")) {
      std::vector<double> r;
      get_to(s, "scale_range", r, w);
      if (r.size() != 2)
        throw ConfigError(w + ".scale_range: expected [min, max]");
      sd.spec.min_frac = r[0];
      sd.spec.max_frac = r[1];
    }
    get_to(s, "noise_std", sd.spec.noise_std, w);
    get_to(s, "seed", sd.spec.seed, w);
    cfg.synthetic = sd;
  }
  if (j.contains("idx")) {
    const json& s = j.at("idx");
    std::string w = where + ".idx";
    reject_unknown(s, {"train_images", "train_labels", "val_images",
                       "val_labels"},
                   w);
    IdxPathsConfig p;
    get_to(s, "train_images", p.train_images, w);
    get_to(s, "train_labels", p.train_labels, w);
    get_to(s, "val_images", p.val_images, w);
    get_to(s, "val_labels", p.val_labels, w);
    cfg.idx = p;
  }
  cfg.validate();
  return cfg;
}

json data_config_to_json(const DataSourceConfig& cfg) {
  json j;
  if (cfg.synthetic) {
    json s;
    s["canvas"] = cfg.synthetic->spec.canvas;
    s["samples_per_class"] = cfg.synthetic->spec.samples_per_class;
    s["val_samples_per_class"] = cfg.synthetic->val_samples_per_class;
    s["scale_range"] = std::vector<double>{cfg.synthetic->spec.min_frac,
                                           cfg.synthetic->spec.max_frac};
    s["noise_std"] = cfg.synthetic->spec.noise_std;
    s["seed"] = cfg.synthetic->spec.seed;
    j["synthetic"] = s;
  }
  if (cfg.idx) {
    json s;
    s["train_images"] = cfg.idx->train_images;
    s["train_labels"] = cfg.idx->train_labels;
    s["val_images"] = cfg.idx->val_images;
    s["val_labels"] = cfg.idx->val_labels;
    j["idx"] = s;
  }
  return j;
}

CliConfig cli_config_from_json(const json& j) {
  reject_unknown(j, {"model", "train", "data", "output_dir"}, "config");
  CliConfig cfg;
  if (!j.contains("model")) throw ConfigError("config.model: required");
  cfg.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
  if (j.contains("data")) cfg.data = data_config_from_json(j.at("data"));
  get_to(j, "output_dir", cfg.output_dir, "config");
  return cfg;
}

json cli_config_to_json(const CliConfig& cfg) {
  json j;
  j["model"] = model_config_to_json(cfg.model);
  j["train"] = train_config_to_json(cfg.train);
  j["data"] = data_config_to_json(cfg.data);
  j["output_dir"] = cfg.output_dir;
  return j;
}

CliConfig load_cli_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": invalid JSON (" + e.what() + ")");
  }
  return cli_config_from_json(j);
}

}  // namespace vitae
