#pragma once

#include <map>
#include <string>

#include "roboenv/autograd.hpp"

namespace roboenv::nn {

// Ordered parameter registry. Iteration order is insertion order, which makes
// optimizer updates and checkpoint layout stable across runs.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init);
  const Var& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<std::pair<std::string, Var>>& items() { return items_; }
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }

  long total_params() const;
  void zero_grads();
  double grad_norm() const;

  // Binary checkpoint with a JSON header (version, metadata, tensor shapes).
  void save(const std::string& path, const std::string& meta_json) const;
  // Loads values into already-registered parameters (shapes must match).
  // Returns the checkpoint's metadata JSON string.
  std::string load(const std::string& path);

 private:
  std::vector<std::pair<std::string, Var>> items_;
  std::map<std::string, size_t> index_;
};

double checkpoint_meta(const std::string& path, std::string& meta_json_out);  // returns version

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables clipping
  long t = 0;
  std::vector<Tensor> m, v;

  void step(ParamStore& params);
};

// ===== layers =====

struct Linear {
  Var W, b;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, long in, long out, Rng& rng, bool bias = true,
         bool zero_init = false);
  Var fwd(const Var& x) const { return linear(x, W, b); }
};

struct Conv2dLayer {
  Var W, b;
  int stride = 1, pad = 1;
  Conv2dLayer() = default;
  Conv2dLayer(ParamStore& ps, const std::string& name, long cin, long cout, int k, int stride, int pad,
              Rng& rng, bool zero_init = false);
  Var fwd(const Var& x) const { return conv2d(x, W, b, stride, pad); }
};

struct GroupNormLayer {
  Var gain, bias;
  int groups = 8;
  GroupNormLayer() = default;
  GroupNormLayer(ParamStore& ps, const std::string& name, long channels, int groups);
  Var fwd(const Var& x) const { return group_norm(x, groups, gain, bias); }
};

struct LayerNormLayer {
  Var gain, bias;
  LayerNormLayer() = default;
  LayerNormLayer(ParamStore& ps, const std::string& name, long dim);
  Var fwd(const Var& x) const { return layer_norm(x, gain, bias); }
};

struct EmbeddingLayer {
  Var table;
  EmbeddingLayer() = default;
  EmbeddingLayer(ParamStore& ps, const std::string& name, long vocab, long dim, Rng& rng);
  Var fwd(const std::vector<long>& ids) const { return embedding(ids, table); }
};

// ===== positional / timestep encodings =====

// Standard sin/cos embedding of arbitrary scalar positions.
Tensor sinusoid_embed(const std::vector<double>& pos, long dim, double max_period = 10000.0);
// Factorized 2D spatial encoding: first half encodes y, second half x. Shape (H*W, dim).
Tensor spatial_pos_encoding(long H, long W, long dim);

}  // namespace roboenv::nn
