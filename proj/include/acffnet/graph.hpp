#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "acffnet/acff.hpp"
#include "acffnet/conv_unit.hpp"
#include "acffnet/error.hpp"
#include "acffnet/layers.hpp"
#include "acffnet/tensor.hpp"

namespace acff {

inline constexpr std::size_t npos = static_cast<std::size_t>(-1);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum class ParamRole : std::uint8_t { conv_weight, bias, bn_gamma, bn_beta, bn_mean, bn_var };

constexpr bool is_trainable(ParamRole r) { return r != ParamRole::bn_mean && r != ParamRole::bn_var; }

template <typename T>
struct Parameter {
  std::string name;
  ParamRole role = ParamRole::conv_weight;
  std::vector<std::uint32_t> dims;
  Tensor<T> value;
};

template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string name, ParamRole role, std::vector<std::uint32_t> dims, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    const std::size_t id = items_.size();
    index_.emplace(name, id);
    items_.push_back({std::move(name), role, std::move(dims), std::move(value)});
    return id;
  }

  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? npos : it->second;
  }

  const Parameter<T>& operator[](std::size_t i) const { return items_[i]; }
  Parameter<T>& operator[](std::size_t i) { return items_[i]; }
  std::size_t size() const { return items_.size(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }

  std::size_t element_count() const {
    std::size_t total = 0;
    for (const auto& p : items_) total += p.value.size();
    return total;
  }

 private:
  std::vector<Parameter<T>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Layer descriptions
// ---------------------------------------------------------------------------

enum class LayerKind { conv, acff, maxpool, global_pool, softmax, dropout };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::acff: return "acff";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::global_pool: return "global-pool";
    case LayerKind::softmax: return "softmax";
    case LayerKind::dropout: return "dropout";
  }
  return "?";
}

struct ConvLayer {
  ConvUnitSpec unit;
};
struct AcffLayer {
  AcffConfig cfg;
};
struct MaxPoolLayer {
  std::size_t window = 2;
  std::size_t stride = 2;
};
struct GlobalPoolLayer {};
struct SoftmaxLayer {};
struct DropoutLayer {
  double rate = 0.2;
};

struct LayerSpec {
  std::string name;
  std::variant<ConvLayer, AcffLayer, MaxPoolLayer, GlobalPoolLayer, SoftmaxLayer, DropoutLayer> config;

  LayerKind kind() const { return static_cast<LayerKind>(config.index()); }
};

inline Shape layer_output_shape(const LayerSpec& layer, const Shape& in) {
  switch (layer.kind()) {
    case LayerKind::conv: return std::get<ConvLayer>(layer.config).unit.geom.output_shape(in);
    case LayerKind::acff: {
      const auto& cfg = std::get<AcffLayer>(layer.config).cfg;
      if (in.c != cfg.in_channels) throw ShapeError("layer '" + layer.name + "' expects " +
                                                    std::to_string(cfg.in_channels) + " channels");
      return {in.n, cfg.out_channels, in.h, in.w};
    }
    case LayerKind::maxpool: {
      const auto& p = std::get<MaxPoolLayer>(layer.config);
      if (in.h < p.window || in.w < p.window)
        throw ShapeError("layer '" + layer.name + "' pooling window larger than input " + in.str());
      return {in.n, in.c, (in.h - p.window) / p.stride + 1, (in.w - p.window) / p.stride + 1};
    }
    case LayerKind::global_pool: return {in.n, in.c, 1, 1};
    case LayerKind::softmax:
      if (in.h != 1 || in.w != 1) throw ShapeError("softmax layer '" + layer.name + "' needs a pooled input");
      return in;
    case LayerKind::dropout: return in;
  }
  return in;
}

// Output shape of every layer for a given input.
inline std::vector<Shape> shape_trace(const std::vector<LayerSpec>& layers, Shape in) {
  std::vector<Shape> out;
  out.reserve(layers.size());
  for (const auto& l : layers) {
    in = layer_output_shape(l, in);
    out.push_back(in);
  }
  return out;
}

// Store indices of one conv unit's parameters (npos if absent).
struct ConvBinding {
  std::size_t weight = npos;
  std::size_t bias = npos;
  std::size_t gamma = npos;
  std::size_t beta = npos;
  std::size_t mean = npos;
  std::size_t var = npos;
};

struct AcffBinding {
  ConvBinding reduce;
  std::vector<ConvBinding> branches;
  ConvBinding project;
};

using LayerBinding = std::variant<std::monostate, ConvBinding, AcffBinding>;

// Build recipe for the named architectures; stored in weight files.
struct ModelRecipe {
  std::string arch = "emergencynet";  // or standard | depthwise-separable | spatially-separable
  FusionMode fusion = FusionMode::add;
  std::size_t classes = 5;
  std::size_t input = 240;
  std::vector<std::size_t> channels{16, 64, 96, 128, 128, 128, 256};
  std::vector<std::size_t> dilations{1, 2, 3};
  std::size_t reduction = 2;
  bool skip = true;
  double dropout = 0.2;
  std::vector<std::string> labels{"collapsed_building", "fire_smoke", "flood", "traffic_accident", "normal"};

  friend bool operator==(const ModelRecipe&, const ModelRecipe&) = default;
};

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

template <typename T>
class GraphBuilder;

template <typename T>
class ModelGraph {
 public:
  ModelGraph() = default;

  const Shape& input_shape() const { return input_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<Shape>& output_shapes() const { return shapes_; }
  const std::vector<LayerBinding>& bindings() const { return bindings_; }
  const ParameterStore<T>& params() const { return params_; }
  ParameterStore<T>& params() { return params_; }
  const ActivationSpec& activation() const { return act_; }
  const std::optional<ModelRecipe>& recipe() const { return recipe_; }
  void set_recipe(ModelRecipe r) { recipe_ = std::move(r); }

  bool initialized() const { return initialized_; }
  void mark_initialized(bool v = true) { initialized_ = v; }

  std::size_t layer_index(const std::string& name) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].name == name) return i;
    return npos;
  }

  Shape output_shape() const { return shapes_.empty() ? input_ : shapes_.back(); }
  std::size_t num_classes() const { return output_shape().c; }

  std::vector<std::string> labels() const {
    if (recipe_ && recipe_->labels.size() == num_classes()) return recipe_->labels;
    std::vector<std::string> out;
    for (std::size_t i = 0; i < num_classes(); ++i) out.push_back("class_" + std::to_string(i));
    return out;
  }

  ConvUnitRefs<T> refs(const ConvBinding& b) const {
    ConvUnitRefs<T> r;
    r.weights = &params_[b.weight].value;
    if (b.bias != npos) r.bias = params_[b.bias].value.data();
    if (b.gamma != npos) {
      r.bn.gamma = params_[b.gamma].value.data();
      r.bn.beta = params_[b.beta].value.data();
      r.bn.mean = params_[b.mean].value.data();
      r.bn.var = params_[b.var].value.data();
      r.bn.eps = bn_eps_;
    }
    return r;
  }

  AcffRefs<T> refs(const AcffBinding& b) const {
    AcffRefs<T> r{refs(b.reduce), {}, refs(b.project)};
    for (const auto& br : b.branches) r.branches.push_back(refs(br));
    return r;
  }

  T bn_eps() const { return bn_eps_; }
  T bn_momentum() const { return bn_momentum_; }

  // Index of a terminal softmax's input (the logits), or the last layer.
  std::size_t logits_layer() const {
    if (!layers_.empty() && layers_.back().kind() == LayerKind::softmax) return layers_.size() - 2;
    return layers_.size() - 1;
  }

  // Last conv layer: the classifier projection.
  std::size_t classifier_layer() const {
    for (std::size_t i = layers_.size(); i-- > 0;)
      if (layers_[i].kind() == LayerKind::conv) return i;
    return npos;
  }

  // Feature maps feeding the classifier (skipping dropout).
  std::size_t feature_layer() const {
    const std::size_t cls = classifier_layer();
    if (cls == npos || cls == 0) return npos;
    std::size_t i = cls - 1;
    while (i > 0 && layers_[i].kind() == LayerKind::dropout) --i;
    if (layers_[i].kind() == LayerKind::dropout) return npos;
    return i;
  }

 private:
  friend class GraphBuilder<T>;

  Shape input_{1, 3, 240, 240};
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  std::vector<LayerBinding> bindings_;
  ParameterStore<T> params_;
  ActivationSpec act_;
  T bn_eps_ = T(1e-3);
  T bn_momentum_ = T(0.99);
  std::optional<ModelRecipe> recipe_;
  bool initialized_ = false;
};

struct ConvOptions {
  std::size_t out_channels = 0;  // ignored for depthwise
  std::size_t kh = 3;
  std::size_t kw = 3;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  bool depthwise = false;
  bool bias = false;
  bool batchnorm = true;
  bool activation = true;
};

// Appends shape-checked layers and allocates their parameters.
template <typename T>
class GraphBuilder {
 public:
  explicit GraphBuilder(Shape input, ActivationSpec act = {}) : current_(input) {
    if (!input.live()) throw ShapeError("graph input has a zero dimension");
    act.validate();
    g_.input_ = input;
    g_.act_ = act;
  }

  GraphBuilder& conv(const std::string& name, const ConvOptions& o) {
    const std::size_t in = current_.c;
    const std::size_t out = o.depthwise ? in : o.out_channels;
    ConvUnitSpec unit{same_conv(in, out, o.kh, o.kw, o.stride, o.dilation, o.depthwise ? in : 1), o.bias,
                      o.batchnorm, o.activation};
    ConvBinding b = add_unit(name, unit);
    push({name, ConvLayer{unit}}, b);
    return *this;
  }

  GraphBuilder& acff(const std::string& name, AcffConfig cfg) {
    cfg.in_channels = current_.c;
    cfg.validate();
    AcffBinding b;
    b.reduce = add_unit(name + ".reduce", cfg.reduce_spec());
    for (std::size_t i = 0; i < cfg.dilation_rates.size(); ++i)
      b.branches.push_back(add_unit(name + ".branch_d" + std::to_string(cfg.dilation_rates[i]), cfg.branch_spec(i)));
    b.project = add_unit(name + ".project", cfg.project_spec());
    push({name, AcffLayer{std::move(cfg)}}, b);
    return *this;
  }

  GraphBuilder& maxpool(const std::string& name, std::size_t window = 2, std::size_t stride = 2) {
    push({name, MaxPoolLayer{window, stride}}, std::monostate{});
    return *this;
  }
  GraphBuilder& global_pool(const std::string& name) {
    push({name, GlobalPoolLayer{}}, std::monostate{});
    return *this;
  }
  GraphBuilder& softmax(const std::string& name) {
    push({name, SoftmaxLayer{}}, std::monostate{});
    return *this;
  }
  GraphBuilder& dropout(const std::string& name, double rate) {
    if (!(rate >= 0 && rate < 1)) throw ConfigError("dropout rate must be in [0, 1)");
    push({name, DropoutLayer{rate}}, std::monostate{});
    return *this;
  }

  const Shape& current() const { return current_; }

  ModelGraph<T> build() && { return std::move(g_); }

 private:
  void push(LayerSpec spec, LayerBinding binding) {
    if (spec.name.empty()) throw ConfigError("layer name must not be empty");
    if (!names_.insert(spec.name).second) throw ConfigError("duplicate layer name '" + spec.name + "'");
    current_ = layer_output_shape(spec, current_);
    g_.layers_.push_back(std::move(spec));
    g_.shapes_.push_back(current_);
    g_.bindings_.push_back(std::move(binding));
  }

  ConvBinding add_unit(const std::string& prefix, const ConvUnitSpec& unit) {
    unit.geom.validate();
    ConvBinding b;
    const auto& gm = unit.geom;
    const auto oc = static_cast<std::uint32_t>(gm.out_channels);
    b.weight = g_.params_.add(prefix + ".weight", ParamRole::conv_weight,
                              {oc, static_cast<std::uint32_t>(gm.in_per_group()), static_cast<std::uint32_t>(gm.kh),
                               static_cast<std::uint32_t>(gm.kw)},
                              Tensor<T>(gm.weight_shape()));
    const Shape vec{gm.out_channels, 1, 1, 1};
    if (unit.bias) b.bias = g_.params_.add(prefix + ".bias", ParamRole::bias, {oc}, Tensor<T>(vec));
    if (unit.batchnorm) {
      b.gamma = g_.params_.add(prefix + ".bn.gamma", ParamRole::bn_gamma, {oc}, Tensor<T>(vec, T(1)));
      b.beta = g_.params_.add(prefix + ".bn.beta", ParamRole::bn_beta, {oc}, Tensor<T>(vec));
      b.mean = g_.params_.add(prefix + ".bn.mean", ParamRole::bn_mean, {oc}, Tensor<T>(vec));
      b.var = g_.params_.add(prefix + ".bn.var", ParamRole::bn_var, {oc}, Tensor<T>(vec, T(1)));
    }
    return b;
  }

  ModelGraph<T> g_;
  Shape current_;
  std::unordered_set<std::string> names_;
};

// He-normal conv weights, zero biases, identity batchnorm.
template <typename T>
void initialize(ModelGraph<T>& g, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : g.params()) {
    switch (p.role) {
      case ParamRole::conv_weight: {
        const double fan_in = static_cast<double>(p.dims[1]) * p.dims[2] * p.dims[3];
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (auto& v : p.value.data()) v = static_cast<T>(dist(rng));
        break;
      }
      case ParamRole::bias:
      case ParamRole::bn_beta:
      case ParamRole::bn_mean: p.value.fill(T(0)); break;
      case ParamRole::bn_gamma:
      case ParamRole::bn_var: p.value.fill(T(1)); break;
    }
  }
  g.mark_initialized();
}

// Same structure, parameters converted to another precision.
template <typename U, typename T>
ModelGraph<U> convert_graph(const ModelGraph<T>& g, ModelGraph<U> shell) {
  if (shell.params().size() != g.params().size()) throw ConfigError("convert_graph structure mismatch");
  for (std::size_t i = 0; i < g.params().size(); ++i) shell.params()[i].value = g.params()[i].value.template cast<U>();
  shell.mark_initialized(g.initialized());
  return shell;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct DropoutCache {
  std::vector<std::uint8_t> mask;
};

template <typename T>
using LayerCache = std::variant<std::monostate, ConvUnitCache<T>, AcffCache<T>, MaxPoolCache, DropoutCache>;

// Per-call activation record owned by one execution context.
template <typename T>
struct Workspace {
  bool record = false;        // cache intermediates for backward
  bool keep_outputs = false;  // keep every layer output
  Phase phase = Phase::infer;
  Tensor<T> input;
  std::vector<Tensor<T>> outputs;
  std::vector<LayerCache<T>> caches;

  static Workspace recording() {
    Workspace w;
    w.record = true;
    w.keep_outputs = true;
    return w;
  }
};

template <typename T>
Tensor<T> forward(const ModelGraph<T>& g, const Tensor<T>& input, Phase phase, Workspace<T>* ws = nullptr,
                  std::uint64_t dropout_seed = 0) {
  if (!g.initialized()) throw ConfigError("graph parameters are not initialized");
  const Shape& expect = g.input_shape();
  const Shape& in = input.shape();
  if (in.c != expect.c || in.h != expect.h || in.w != expect.w)
    throw ShapeError("input " + in.str() + " does not match graph input " + expect.str());
  const bool record = ws && ws->record;
  const bool keep = ws && (ws->keep_outputs || ws->record);
  if (ws) {
    ws->phase = phase;
    ws->outputs.clear();
    ws->caches.clear();
    if (record) ws->input = input;
    if (keep) ws->outputs.reserve(g.layers().size());
    if (record) ws->caches.resize(g.layers().size());
  }
  std::mt19937_64 rng(dropout_seed);
  const ActivationSpec& act = g.activation();

  Tensor<T> x = input;
  for (std::size_t i = 0; i < g.layers().size(); ++i) {
    const LayerSpec& layer = g.layers()[i];
    const LayerBinding& bind = g.bindings()[i];
    Tensor<T> y;
    switch (layer.kind()) {
      case LayerKind::conv: {
        ConvUnitCache<T>* cache = nullptr;
        if (record) cache = &ws->caches[i].template emplace<ConvUnitCache<T>>();
        y = conv_unit_forward(x, std::get<ConvLayer>(layer.config).unit, g.refs(std::get<ConvBinding>(bind)), phase,
                              act, cache);
        break;
      }
      case LayerKind::acff: {
        AcffCache<T>* cache = nullptr;
        if (record) cache = &ws->caches[i].template emplace<AcffCache<T>>();
        y = acff_forward(x, std::get<AcffLayer>(layer.config).cfg, g.refs(std::get<AcffBinding>(bind)), phase, act,
                         cache);
        break;
      }
      case LayerKind::maxpool: {
        const auto& p = std::get<MaxPoolLayer>(layer.config);
        MaxPoolCache* cache = nullptr;
        if (record) cache = &ws->caches[i].template emplace<MaxPoolCache>();
        y = maxpool2d(x, p.window, p.stride, cache);
        break;
      }
      case LayerKind::global_pool: y = global_avg_pool(x); break;
      case LayerKind::softmax: y = softmax(x); break;
      case LayerKind::dropout: {
        const double rate = std::get<DropoutLayer>(layer.config).rate;
        std::vector<std::uint8_t>* mask = nullptr;
        if (record) mask = &ws->caches[i].template emplace<DropoutCache>().mask;
        y = dropout(x, rate, phase, rng, mask);
        break;
      }
    }
    if (keep) ws->outputs.push_back(y);
    x = std::move(y);
  }
  return x;
}

// Gradients parallel to the parameter store; running statistics stay zero.
template <typename T>
struct Gradients {
  std::vector<Tensor<T>> values;

  explicit Gradients(const ParameterStore<T>& store) {
    values.reserve(store.size());
    for (const auto& p : store) values.emplace_back(p.value.shape());
  }
  void zero() {
    for (auto& v : values) v.fill(T(0));
  }
};

namespace detail {

template <typename T>
void accumulate(Gradients<T>* grads, std::size_t id, std::span<const T> src) {
  if (!grads || id == npos || src.empty()) return;
  T* dst = grads->values[id].raw();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

template <typename T>
void accumulate_unit(Gradients<T>* grads, const ConvBinding& b, const ConvUnitGrads<T>& g) {
  if (!grads) return;
  if (!g.weights.empty()) accumulate<T>(grads, b.weight, g.weights.data());
  accumulate<T>(grads, b.bias, g.bias);
  accumulate<T>(grads, b.gamma, g.gamma);
  accumulate<T>(grads, b.beta, g.beta);
}

}  // namespace detail

// Propagates grad (w.r.t. the output of layer `from`) down to the output of
// layer `until` (npos = the network input), accumulating parameter
// gradients into grads when given. The network-input gradient is only
// produced when input_grad is set; otherwise the result is empty.
template <typename T>
Tensor<T> backward(const ModelGraph<T>& g, const Workspace<T>& ws, std::size_t from, Tensor<T> grad,
                   Gradients<T>* grads, std::size_t until = npos, bool input_grad = false) {
  if (!ws.record || ws.caches.size() != g.layers().size())
    throw ShapeError("backward needs a recorded forward pass of the same graph");
  if (from >= g.layers().size()) throw ShapeError("backward start layer out of range");
  if (grad.shape() != ws.outputs[from].shape())
    throw ShapeError("backward gradient " + grad.shape().str() + " does not match layer output " +
                     ws.outputs[from].shape().str());
  const ActivationSpec& act = g.activation();
  const bool want_params = grads != nullptr;
  for (std::size_t i = from + 1; i-- > 0;) {
    if (until != npos && i == until) break;
    const LayerSpec& layer = g.layers()[i];
    const Tensor<T>& x = i == 0 ? ws.input : ws.outputs[i - 1];
    const bool want_input = i > 0 || input_grad;
    switch (layer.kind()) {
      case LayerKind::conv: {
        const auto& b = std::get<ConvBinding>(g.bindings()[i]);
        auto ug = conv_unit_backward(x, std::get<ConvLayer>(layer.config).unit, g.refs(b),
                                     std::get<ConvUnitCache<T>>(ws.caches[i]), ws.phase, act, grad, want_input,
                                     want_params);
        detail::accumulate_unit(grads, b, ug);
        grad = std::move(ug.input);
        break;
      }
      case LayerKind::acff: {
        const auto& b = std::get<AcffBinding>(g.bindings()[i]);
        auto ag = acff_backward(x, std::get<AcffLayer>(layer.config).cfg, g.refs(b),
                                std::get<AcffCache<T>>(ws.caches[i]), ws.phase, act, grad, want_input, want_params);
        detail::accumulate_unit(grads, b.reduce, ag.reduce);
        for (std::size_t k = 0; k < b.branches.size(); ++k) detail::accumulate_unit(grads, b.branches[k], ag.branches[k]);
        detail::accumulate_unit(grads, b.project, ag.project);
        grad = std::move(ag.input);
        break;
      }
      case LayerKind::maxpool: grad = maxpool2d_backward(std::get<MaxPoolCache>(ws.caches[i]), grad); break;
      case LayerKind::global_pool: grad = global_avg_pool_backward(x.shape(), grad); break;
      case LayerKind::softmax: grad = softmax_backward(ws.outputs[i], grad); break;
      case LayerKind::dropout:
        grad = dropout_backward(grad, std::get<DropoutCache>(ws.caches[i]).mask,
                                std::get<DropoutLayer>(layer.config).rate, ws.phase);
        break;
    }
  }
  return grad;
}

// Folds train-phase batch statistics of a recorded pass into the running
// batchnorm statistics.
template <typename T>
void apply_batch_stats(ModelGraph<T>& g, const Workspace<T>& ws) {
  const T momentum = g.bn_momentum();
  auto fold = [&](const ConvBinding& b, const ConvUnitCache<T>& c) {
    if (b.mean == npos || c.stats.mean.empty()) return;
    update_running_stats<T>(g.params()[b.mean].value.data(), g.params()[b.var].value.data(), c.stats, momentum);
  };
  for (std::size_t i = 0; i < ws.caches.size(); ++i) {
    const auto& cache = ws.caches[i];
    if (const auto* c = std::get_if<ConvUnitCache<T>>(&cache)) {
      fold(std::get<ConvBinding>(g.bindings()[i]), *c);
    } else if (const auto* a = std::get_if<AcffCache<T>>(&cache)) {
      const auto& b = std::get<AcffBinding>(g.bindings()[i]);
      fold(b.reduce, a->reduce);
      for (std::size_t k = 0; k < b.branches.size(); ++k) fold(b.branches[k], a->branches[k]);
      fold(b.project, a->project);
    }
  }
}

// Class probabilities for a single (1, c, h, w) image.
template <typename T>
std::vector<T> predict(const ModelGraph<T>& g, const Tensor<T>& image) {
  Tensor<T> out = forward(g, image, Phase::infer);
  return {out.raw(), out.raw() + out.size()};
}

}  // namespace acff
