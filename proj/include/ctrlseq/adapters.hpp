#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ctrlseq/errors.hpp"
#include "ctrlseq/tensor.hpp"

namespace ctrlseq {

// One residual adapter: a LayerNorm -> down-projection -> ReLU -> up-projection
// bottleneck per decoder layer, owned by a single attribute or task label.
// The up-projection starts at zero so a freshly spawned adapter is an exact
// identity on the base model.
struct AdapterLayer {
  Tensor ln_scale;  // d
  Tensor ln_shift;  // d
  Tensor w_down;    // d x b
  Tensor b_down;    // b
  Tensor w_up;      // b x d
  Tensor b_up;      // d
};

struct AdapterParams {
  std::string label;
  std::size_t bottleneck = 0;
  std::vector<AdapterLayer> layers;

  static AdapterParams init(const std::string& label, std::size_t n_layers, std::size_t d,
                            std::size_t b, Rng& rng) {
    if (b < 1) throw ConfigError("adapter: bottleneck must be >= 1");
    AdapterParams a;
    a.label = label;
    a.bottleneck = b;
    a.layers.reserve(n_layers);
    double stddev = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < n_layers; ++l) {
      AdapterLayer al;
      al.ln_scale = Tensor({d}, 1.0);
      al.ln_shift = Tensor({d}, 0.0);
      al.w_down = Tensor::randn({d, b}, rng, stddev);
      al.b_down = Tensor({b}, 0.0);
      al.w_up = Tensor({b, d}, 0.0);  // zero so the adapted model equals the base model
      al.b_up = Tensor({d}, 0.0);
      a.layers.push_back(al);
    }
    for (auto& t : a.parameters_of(a)) t.set_requires_grad(true);
    return a;
  }

  std::vector<Tensor> parameters() { return parameters_of(*this); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      n += l.ln_scale.size() + l.ln_shift.size() + l.w_down.size() + l.b_down.size() +
           l.w_up.size() + l.b_up.size();
    return n;
  }

 private:
  static std::vector<Tensor> parameters_of(AdapterParams& a) {
    std::vector<Tensor> out;
    for (auto& l : a.layers) {
      out.push_back(l.ln_scale);
      out.push_back(l.ln_shift);
      out.push_back(l.w_down);
      out.push_back(l.b_down);
      out.push_back(l.w_up);
      out.push_back(l.b_up);
    }
    return out;
  }
};

// Exact trainable-parameter count of one adapter, biases included:
// per layer  d*b (down) + b (down bias) + b*d (up) + d (up bias) + 2d (LN).
inline std::size_t adapter_param_count(std::size_t d, std::size_t b, std::size_t l) {
  if (d < 1 || b < 1 || l < 1) throw ConfigError("adapter_param_count: arguments must be >= 1");
  return l * (d * b + b + b * d + d + 2 * d);
}

// H + ReLU(LN(H) W_down + b_down) W_up + b_up over one layer's activations.
inline Tensor adapter_forward(const Tensor& h, const AdapterLayer& layer, double eps = 1e-5) {
  Tensor normed = layer_norm(h, layer.ln_scale, layer.ln_shift, eps);
  Tensor mid = relu(add(matmul(normed, layer.w_down), layer.b_down));
  Tensor up = add(matmul(mid, layer.w_up), layer.b_up);
  return add(up, h);
}

// Label -> adapter map. At most one adapter is active during a forward pass;
// removal or training of one label never touches another.
class AdapterRegistry {
 public:
  bool contains(const std::string& label) const { return adapters_.count(label) > 0; }

  AdapterParams& add(AdapterParams params) {
    if (contains(params.label))
      throw ContractError("adapter registry: duplicate label '" + params.label + "'");
    auto [it, ok] = adapters_.emplace(params.label, std::move(params));
    (void)ok;
    return it->second;
  }

  AdapterParams& get(const std::string& label) {
    auto it = adapters_.find(label);
    if (it == adapters_.end())
      throw ContractError("adapter registry: unknown label '" + label + "'");
    return it->second;
  }

  const AdapterParams& get(const std::string& label) const {
    auto it = adapters_.find(label);
    if (it == adapters_.end())
      throw ContractError("adapter registry: unknown label '" + label + "'");
    return it->second;
  }

  void remove(const std::string& label) { adapters_.erase(label); }

  std::size_t size() const { return adapters_.size(); }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : adapters_) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, AdapterParams> adapters_;  // ordered for determinism
};

}  // namespace ctrlseq
