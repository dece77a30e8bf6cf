#pragma once

#include <cstddef>
#include <cstdio>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "acffnet/graph.hpp"

namespace acff {

// Multiply-accumulates count as one FLOP each. Batchnorm, activation,
// pooling and fusion are tallied separately as elementwise ops.
struct LayerComplexity {
  std::string name;
  std::string kind;
  Shape out;
  std::size_t params = 0;
  std::size_t macs = 0;
  std::size_t elementwise = 0;
  std::size_t bytes = 0;
};

struct ComplexityReport {
  std::vector<LayerComplexity> layers;
  std::size_t params = 0;
  std::size_t macs = 0;
  std::size_t elementwise = 0;
  std::size_t bytes = 0;
};

inline constexpr std::size_t bytes_per_param = 4;

namespace detail {

inline void unit_cost(const ConvUnitSpec& u, const Shape& out, LayerComplexity& lc) {
  lc.params += u.param_count();
  lc.macs += u.geom.macs(out);
  const std::size_t n = out.count();
  lc.elementwise += (u.batchnorm ? n : 0) + (u.activation ? n : 0) + (u.bias ? n : 0);
}

inline LayerComplexity layer_cost(const LayerSpec& layer, const Shape& in, const Shape& out) {
  LayerComplexity lc{layer.name, std::string(to_string(layer.kind())), out};
  switch (layer.kind()) {
    case LayerKind::conv: unit_cost(std::get<ConvLayer>(layer.config).unit, out, lc); break;
    case LayerKind::acff: {
      const auto& cfg = std::get<AcffLayer>(layer.config).cfg;
      const Shape mid{in.n, cfg.reduced_channels(), in.h, in.w};
      unit_cost(cfg.reduce_spec(), mid, lc);
      for (std::size_t i = 0; i < cfg.dilation_rates.size(); ++i) unit_cost(cfg.branch_spec(i), mid, lc);
      lc.elementwise += mid.count() * (cfg.branch_count() > 1 ? cfg.branch_count() - 1 : 0);
      unit_cost(cfg.project_spec(), out, lc);
      break;
    }
    case LayerKind::maxpool: {
      const auto& p = std::get<MaxPoolLayer>(layer.config);
      lc.elementwise = out.count() * (p.window * p.window - 1);
      break;
    }
    case LayerKind::global_pool: lc.elementwise = in.count(); break;
    case LayerKind::softmax: lc.elementwise = 3 * out.count(); break;
    case LayerKind::dropout: break;
  }
  lc.bytes = lc.params * bytes_per_param;
  return lc;
}

}  // namespace detail

inline ComplexityReport analyze_layers(const std::vector<LayerSpec>& layers, const Shape& input) {
  ComplexityReport r;
  Shape in = input;
  for (const auto& l : layers) {
    const Shape out = layer_output_shape(l, in);
    r.layers.push_back(detail::layer_cost(l, in, out));
    const auto& lc = r.layers.back();
    r.params += lc.params;
    r.macs += lc.macs;
    r.elementwise += lc.elementwise;
    r.bytes += lc.bytes;
    in = out;
  }
  return r;
}

// Parameters, bytes and multiply-accumulates at the graph's own input size.
template <typename T>
ComplexityReport count_params(const ModelGraph<T>& g) {
  return analyze_layers(g.layers(), g.input_shape());
}

// Multiply-accumulates at an arbitrary input size.
template <typename T>
ComplexityReport count_macs(const ModelGraph<T>& g, const Shape& input) {
  return analyze_layers(g.layers(), input);
}

inline std::string to_text(const ComplexityReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "layer" << std::setw(13) << "kind" << std::setw(18) << "output"
     << std::right << std::setw(12) << "params" << std::setw(15) << "macs" << std::setw(12) << "bytes" << '\n';
  for (const auto& l : r.layers) {
    std::ostringstream shape;
    shape << l.out.c << 'x' << l.out.h << 'x' << l.out.w;
    os << std::left << std::setw(14) << l.name << std::setw(13) << l.kind << std::setw(18) << shape.str()
       << std::right << std::setw(12) << l.params << std::setw(15) << l.macs << std::setw(12) << l.bytes << '\n';
  }
  os << std::left << std::setw(45) << "total" << std::right << std::setw(12) << r.params << std::setw(15) << r.macs
     << std::setw(12) << r.bytes << '\n';
  char buf[160];
  std::snprintf(buf, sizeof buf, "weights %.4f MB (%.1f KB), %.2f M MACs, %.2f M elementwise ops\n",
                static_cast<double>(r.bytes) / 1e6, static_cast<double>(r.bytes) / 1e3,
                static_cast<double>(r.macs) / 1e6, static_cast<double>(r.elementwise) / 1e6);
  os << buf;
  return os.str();
}

inline nlohmann::json to_json(const ComplexityReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers)
    layers.push_back({{"name", l.name},
                      {"kind", l.kind},
                      {"out_shape", {l.out.n, l.out.c, l.out.h, l.out.w}},
                      {"params", l.params},
                      {"macs", l.macs},
                      {"elementwise", l.elementwise},
                      {"bytes", l.bytes}});
  return {{"layers", layers},
          {"total", {{"params", r.params}, {"macs", r.macs}, {"elementwise", r.elementwise}, {"bytes", r.bytes}}}};
}

}  // namespace acff
