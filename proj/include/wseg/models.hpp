#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "wseg/autodiff.hpp"
#include "wseg/error.hpp"
#include "wseg/rng.hpp"
#include "wseg/tensor.hpp"

namespace wseg::models {

enum class Arch { gp_unet, gp_reconresnet, gp_shuffleunet };
enum class Upsample { bilinear_conv, lanczos_conv };
enum class Mode { classify, heatmap };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::gp_unet: return "gp_unet";
    case Arch::gp_reconresnet: return "gp_reconresnet";
    case Arch::gp_shuffleunet: return "gp_shuffleunet";
  }
  return "?";
}

inline Arch arch_from_string(const std::string& s) {
  if (s == "gp_unet") return Arch::gp_unet;
  if (s == "gp_reconresnet") return Arch::gp_reconresnet;
  if (s == "gp_shuffleunet") return Arch::gp_shuffleunet;
  throw ConfigError("unknown architecture '" + s +
                    "' (expected gp_unet, gp_reconresnet or gp_shuffleunet)");
}

inline std::string to_string(Upsample u) {
  return u == Upsample::bilinear_conv ? "bilinear_conv" : "lanczos_conv";
}

inline Upsample upsample_from_string(const std::string& s) {
  if (s == "bilinear_conv") return Upsample::bilinear_conv;
  if (s == "lanczos_conv") return Upsample::lanczos_conv;
  throw ConfigError("unknown upsample mode '" + s +
                    "' (expected bilinear_conv or lanczos_conv)");
}

struct ModelConfig {
  Arch arch = Arch::gp_unet;
  int in_channels = 4;
  int num_classes = 3;
  int base_filters = 64;
  int depth = 3;
  int residual_blocks = 8;  // gp_reconresnet only
  float dropout_p = 0.5f;
  Upsample upsample = Upsample::bilinear_conv;

  void validate() const {
    std::string problems;
    auto bad = [&](const std::string& m) { problems += (problems.empty() ? "" : "; ") + m; };
    if (num_classes < 2) bad("num_classes must be >= 2");
    if (in_channels < 1) bad("in_channels must be >= 1");
    if (base_filters < 1) bad("base_filters must be >= 1");
    if (depth < 1) bad("depth must be >= 1");
    if (residual_blocks < 0) bad("residual_blocks must be >= 0");
    if (!(dropout_p >= 0.0f && dropout_p < 1.0f)) bad("dropout_p must be in [0,1)");
    if (!problems.empty()) throw ConfigError("invalid model config: " + problems);
  }

  /// Spatial extents must be divisible by this for a valid forward pass.
  int spatial_divisor() const {
    if (arch == Arch::gp_reconresnet) return 4;  // two stride-2 stages
    return 1 << depth;
  }

  nlohmann::json to_json() const {
    return {{"arch", to_string(arch)},
            {"in_channels", in_channels},
            {"num_classes", num_classes},
            {"base_filters", base_filters},
            {"depth", depth},
            {"residual_blocks", residual_blocks},
            {"dropout_p", dropout_p},
            {"upsample", to_string(upsample)}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.arch = arch_from_string(j.at("arch").get<std::string>());
    c.in_channels = j.at("in_channels").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.base_filters = j.at("base_filters").get<int>();
    c.depth = j.at("depth").get<int>();
    c.residual_blocks = j.at("residual_blocks").get<int>();
    c.dropout_p = j.at("dropout_p").get<float>();
    c.upsample = upsample_from_string(j.at("upsample").get<std::string>());
    c.validate();
    return c;
  }
};

/// An encoder-decoder network with a toggleable global-pooling classification
/// head. classify mode pools the pre-head feature map and applies the 1x1
/// head to the pooled vector; heatmap mode applies the identical head weights
/// per pixel, so eval-mode logits equal the spatial mean of the heatmaps.
class GpModel {
 public:
  static GpModel build(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    GpModel m;
    m.cfg_ = cfg;
    m.seed_ = seed;
    switch (cfg.arch) {
      case Arch::gp_unet: m.build_unet(); break;
      case Arch::gp_reconresnet: m.build_reconresnet(); break;
      case Arch::gp_shuffleunet: m.build_shuffleunet(); break;
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }

  std::vector<ad::Parameter>& parameters() { return params_; }
  const std::vector<ad::Parameter>& parameters() const { return params_; }

  ad::Parameter& parameter(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("no parameter named '" + name + "'");
    return params_[it->second];
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  ad::ValueRef forward_on(ad::Tape& t, ad::ValueRef x, Mode mode, bool train, Rng& dropout_rng) {
    // Copy the dims out: references into the tape go stale as nodes are
    // appended below.
    const std::vector<int64_t> xshape = t.value(x).shape;
    if (xshape.size() != 4) throw InputError("forward: expected input [B,C,H,W]");
    if (xshape[1] != cfg_.in_channels) {
      throw InputError("forward: model expects " + std::to_string(cfg_.in_channels) +
                       " input channels, got " + std::to_string(xshape[1]));
    }
    const int d = cfg_.spatial_divisor();
    if (xshape[2] % d != 0 || xshape[3] % d != 0) {
      throw InputError("forward: spatial extents of " + Tensor::shape_string(xshape) +
                       " must be divisible by " + std::to_string(d) + " for " +
                       to_string(cfg_.arch));
    }
    ad::ValueRef features{-1};
    switch (cfg_.arch) {
      case Arch::gp_unet: features = unet_features(t, x, train, dropout_rng); break;
      case Arch::gp_reconresnet: features = recon_features(t, x, train, dropout_rng); break;
      case Arch::gp_shuffleunet: features = shuffle_features(t, x, train, dropout_rng); break;
    }
    const int64_t bsz = xshape[0];
    auto& hw = p("head.weight");
    auto& hb = p("head.bias");
    if (mode == Mode::heatmap) {
      return t.conv2d(features, t.param(hw), t.param(hb), 1, 0);
    }
    auto pooled = t.global_avg_pool(features);
    auto col = t.reshape(pooled, {bsz, cfg_.base_filters, 1, 1});
    auto logits = t.conv2d(col, t.param(hw), t.param(hb), 1, 0);
    return t.reshape(logits, {bsz, cfg_.num_classes});
  }

  /// Evaluation convenience: runs one forward on a throwaway tape without
  /// gradient recording.
  Tensor forward(const Tensor& batch, Mode mode, bool train = false, uint64_t dropout_seed = 0) {
    ad::Tape t(/*record_gradients=*/false);
    Rng rng(dropout_seed);
    auto x = t.input(batch);
    auto out = forward_on(t, x, mode, train, rng);
    return t.value(out);
  }

  /// Checkpoint directory: model.json (config, seed, parameter index) plus
  /// one WSGT tensor file per parameter.
  void save(const std::filesystem::path& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta;
    meta["format"] = "wseg-checkpoint";
    meta["version"] = 1;
    meta["config"] = cfg_.to_json();
    meta["seed"] = seed_;
    nlohmann::json idx = nlohmann::json::array();
    for (const auto& prm : params_) {
      const std::string file = prm.name + ".wsgt";
      wsgt::write(dir / file, prm.value);
      idx.push_back({{"name", prm.name}, {"file", file}, {"shape", prm.value.shape}});
    }
    meta["params"] = idx;
    std::ofstream out(dir / "model.json");
    if (!out) throw IoError("cannot write " + (dir / "model.json").string());
    out << meta.dump(2) << "\n";
  }

  static GpModel load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "model.json");
    if (!in) throw IoError("cannot open checkpoint manifest " + (dir / "model.json").string());
    nlohmann::json meta;
    try {
      in >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    if (meta.value("format", "") != "wseg-checkpoint" || meta.value("version", 0) != 1) {
      throw IoError("not a version-1 wseg checkpoint: " + (dir / "model.json").string());
    }
    GpModel m = build(ModelConfig::from_json(meta.at("config")), meta.at("seed").get<uint64_t>());
    size_t loaded = 0;
    for (const auto& entry : meta.at("params")) {
      const std::string name = entry.at("name").get<std::string>();
      Tensor t = wsgt::read(dir / entry.at("file").get<std::string>());
      ad::Parameter& prm = m.parameter(name);
      if (!prm.value.same_shape(t)) {
        throw IoError("checkpoint parameter '" + name + "' has shape " + t.shape_str() +
                      ", expected " + prm.value.shape_str());
      }
      prm.value = std::move(t);
      ++loaded;
    }
    if (loaded != m.params_.size()) {
      throw IoError("checkpoint lists " + std::to_string(loaded) + " parameters, model needs " +
                    std::to_string(m.params_.size()));
    }
    return m;
  }

 private:
  int filters(int level) const { return cfg_.base_filters << level; }

  ad::Parameter& p(const std::string& name) { return parameter(name); }

  /// He fan-in initialisation, seeded per parameter name so values do not
  /// depend on creation order.
  void add_conv(const std::string& name, int64_t cout, int64_t cin, int64_t kh, int64_t kw) {
    Rng rng(sub_seed(seed_, "init." + name));
    Tensor w({cout, cin, kh, kw});
    const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * kh * kw));
    for (auto& v : w.data) v = static_cast<float>(rng.normal() * std_dev);
    add_param(name + ".weight", std::move(w));
    add_param(name + ".bias", Tensor({cout}, 0.0f));
  }

  void add_norm(const std::string& name, int64_t c) {
    add_param(name + ".gamma", Tensor({c}, 1.0f));
    add_param(name + ".beta", Tensor({c}, 0.0f));
  }

  void add_param(std::string name, Tensor value) {
    if (index_.count(name) != 0) throw ConfigError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.emplace_back(std::move(name), std::move(value));
  }

  void build_unet() {
    const int d = cfg_.depth;
    for (int i = 0; i < d; ++i) {
      const int cin = i == 0 ? cfg_.in_channels : filters(i - 1);
      add_conv("enc" + std::to_string(i) + ".conv1", filters(i), cin, 3, 3);
      add_conv("enc" + std::to_string(i) + ".conv2", filters(i), filters(i), 3, 3);
    }
    for (int i = d - 2; i >= 0; --i) {
      add_conv("dec" + std::to_string(i) + ".up", filters(i), filters(i + 1), 3, 3);
      add_conv("dec" + std::to_string(i) + ".conv1", filters(i), 2 * filters(i), 3, 3);
      add_conv("dec" + std::to_string(i) + ".conv2", filters(i), filters(i), 3, 3);
    }
    add_conv("head", cfg_.num_classes, cfg_.base_filters, 1, 1);
  }

  void build_reconresnet() {
    const int f0 = cfg_.base_filters;
    add_conv("stem", f0, cfg_.in_channels, 7, 7);
    add_conv("down1", 2 * f0, f0, 3, 3);
    add_conv("down2", 4 * f0, 2 * f0, 3, 3);
    for (int j = 0; j < cfg_.residual_blocks; ++j) {
      const std::string b = "res" + std::to_string(j);
      add_conv(b + ".conv1", 4 * f0, 4 * f0, 3, 3);
      add_norm(b + ".norm1", 4 * f0);
      add_conv(b + ".conv2", 4 * f0, 4 * f0, 3, 3);
      add_norm(b + ".norm2", 4 * f0);
    }
    add_conv("up1", 2 * f0, 4 * f0, 3, 3);
    add_conv("up2", f0, 2 * f0, 3, 3);
    add_conv("head", cfg_.num_classes, f0, 1, 1);
  }

  void build_shuffleunet() {
    const int d = cfg_.depth;
    for (int i = 0; i < d; ++i) {
      const int cin = i == 0 ? cfg_.in_channels : filters(i);
      add_conv("enc" + std::to_string(i) + ".conv1", filters(i), cin, 3, 3);
      add_conv("enc" + std::to_string(i) + ".conv2", filters(i), filters(i), 3, 3);
      if (i < d - 1) {
        // pixel_unshuffle quadruples channels; the 1x1 conv maps to the
        // next level's width
        add_conv("down" + std::to_string(i), filters(i + 1), 4 * filters(i), 1, 1);
      }
    }
    for (int i = d - 2; i >= 0; --i) {
      add_conv("up" + std::to_string(i), 4 * filters(i), filters(i + 1), 1, 1);
      add_conv("dec" + std::to_string(i) + ".conv1", filters(i), 2 * filters(i), 3, 3);
      add_conv("dec" + std::to_string(i) + ".conv2", filters(i), filters(i), 3, 3);
    }
    add_conv("head", cfg_.num_classes, cfg_.base_filters, 1, 1);
  }

  ad::ValueRef double_conv(ad::Tape& t, ad::ValueRef h, const std::string& block) {
    h = t.conv2d(h, t.param(p(block + ".conv1.weight")), t.param(p(block + ".conv1.bias")), 1, 1);
    h = t.relu(h);
    h = t.conv2d(h, t.param(p(block + ".conv2.weight")), t.param(p(block + ".conv2.bias")), 1, 1);
    return t.relu(h);
  }

  ad::ValueRef up_block(ad::Tape& t, ad::ValueRef h, const std::string& name) {
    const auto kind = cfg_.upsample == Upsample::bilinear_conv ? ad::UpsampleKind::bilinear
                                                               : ad::UpsampleKind::lanczos3;
    h = t.upsample2x(h, kind);
    return t.conv2d(h, t.param(p(name + ".weight")), t.param(p(name + ".bias")), 1, 1);
  }

  ad::ValueRef unet_features(ad::Tape& t, ad::ValueRef x, bool train, Rng& rng) {
    const int d = cfg_.depth;
    std::vector<ad::ValueRef> skips;
    ad::ValueRef h = x;
    for (int i = 0; i < d; ++i) {
      h = double_conv(t, h, "enc" + std::to_string(i));
      if (i < d - 1) {
        skips.push_back(h);
        h = t.max_pool2x2(h);
      }
    }
    h = t.dropout(h, cfg_.dropout_p, train, rng);
    for (int i = d - 2; i >= 0; --i) {
      h = up_block(t, h, "dec" + std::to_string(i) + ".up");
      h = t.concat_channels(h, skips[static_cast<size_t>(i)]);
      h = double_conv(t, h, "dec" + std::to_string(i));
    }
    return h;
  }

  ad::ValueRef recon_features(ad::Tape& t, ad::ValueRef x, bool train, Rng& rng) {
    auto h = t.conv2d(x, t.param(p("stem.weight")), t.param(p("stem.bias")), 1, 3);
    h = t.relu(h);
    h = t.conv2d(h, t.param(p("down1.weight")), t.param(p("down1.bias")), 2, 1);
    h = t.relu(h);
    h = t.conv2d(h, t.param(p("down2.weight")), t.param(p("down2.bias")), 2, 1);
    h = t.relu(h);
    for (int j = 0; j < cfg_.residual_blocks; ++j) {
      const std::string b = "res" + std::to_string(j);
      auto r = t.conv2d(h, t.param(p(b + ".conv1.weight")), t.param(p(b + ".conv1.bias")), 1, 1);
      r = t.instance_norm(r, t.param(p(b + ".norm1.gamma")), t.param(p(b + ".norm1.beta")));
      r = t.relu(r);
      r = t.dropout(r, cfg_.dropout_p, train, rng);
      r = t.conv2d(r, t.param(p(b + ".conv2.weight")), t.param(p(b + ".conv2.bias")), 1, 1);
      r = t.instance_norm(r, t.param(p(b + ".norm2.gamma")), t.param(p(b + ".norm2.beta")));
      h = t.add(h, r);
    }
    h = up_block(t, h, "up1");
    h = t.relu(h);
    h = up_block(t, h, "up2");
    return t.relu(h);
  }

  ad::ValueRef shuffle_features(ad::Tape& t, ad::ValueRef x, bool train, Rng& rng) {
    const int d = cfg_.depth;
    std::vector<ad::ValueRef> skips;
    ad::ValueRef h = x;
    for (int i = 0; i < d; ++i) {
      h = double_conv(t, h, "enc" + std::to_string(i));
      if (i < d - 1) {
        skips.push_back(h);
        h = t.pixel_unshuffle(h, 2);
        const std::string dn = "down" + std::to_string(i);
        h = t.conv2d(h, t.param(p(dn + ".weight")), t.param(p(dn + ".bias")), 1, 0);
      }
    }
    h = t.dropout(h, cfg_.dropout_p, train, rng);
    for (int i = d - 2; i >= 0; --i) {
      const std::string up = "up" + std::to_string(i);
      h = t.conv2d(h, t.param(p(up + ".weight")), t.param(p(up + ".bias")), 1, 0);
      h = t.pixel_shuffle(h, 2);
      h = t.concat_channels(h, skips[static_cast<size_t>(i)]);
      h = double_conv(t, h, "dec" + std::to_string(i));
    }
    return h;
  }

  ModelConfig cfg_;
  uint64_t seed_ = 0;
  std::vector<ad::Parameter> params_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace wseg::models
