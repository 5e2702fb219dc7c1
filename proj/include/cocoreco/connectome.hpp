#pragma once

#include <string>
#include <vector>

#include "cocoreco/common.hpp"
#include "cocoreco/ops.hpp"
#include "cocoreco/tensor.hpp"

namespace cocoreco {

// ---------------------------------------------------------------------------
// Declarative area/edge graph. Parsed from the JSON document described in the
// README; compiled into a deterministic two-phase execution plan with
// feedback edges unrolled once.
// ---------------------------------------------------------------------------

struct AreaSpec {
    std::string name;
    int out_channels = 0;
    int kernel = 1;
    int stride = 1;
    int padding = 0;
    bool is_input = false;  // the input placeholder carries no convolution
    bool cab_site = false;
};

enum class EdgeDirection { forward, backward };

inline const char* to_string(EdgeDirection d) {
    return d == EdgeDirection::forward ? "forward" : "backward";
}

struct EdgeSpec {
    std::string src;
    std::string dst;
    EdgeDirection direction = EdgeDirection::forward;
    double ec_weight = 1.0;  // fixed effective-connectivity multiplier

    std::string label() const { return src + "->" + dst; }
};

struct ConnectomeSpec {
    int version = 1;
    std::vector<AreaSpec> areas;
    std::vector<EdgeSpec> edges;

    const AreaSpec* find_area(const std::string& name) const {
        for (const auto& a : areas)
            if (a.name == name) return &a;
        return nullptr;
    }
    const AreaSpec& input_area() const;
};

struct Refinement {
    EdgeSpec edge;
    std::string target;  // == edge.dst
};

struct ExecutionPlan {
    std::vector<std::string> phase1;       // forward topological order
    std::vector<Refinement> refinements;   // each backward edge applied once
    std::vector<std::string> phase2;       // recompute, strictly downstream
};

// Parses the UTF-8 JSON connectome document. Unknown fields are rejected;
// syntax errors report the line, field errors name the area or edge.
ConnectomeSpec parse_connectome(const std::string& text);

// Checks every structural invariant and returns all violations (empty = ok).
std::vector<std::string> validate_connectome(const ConnectomeSpec& spec);

// Deterministic plan; topological ties break alphabetically by area name.
// Throws value_error when the spec does not validate.
ExecutionPlan compile_plan(const ConnectomeSpec& spec);

// Canonical serialization (areas sorted by name, edges by src/dst/direction)
// and its content hash. Equal specs hash equal regardless of listing order.
std::string canonical_json(const ConnectomeSpec& spec);
std::string spec_hash(const ConnectomeSpec& spec);

// The shipped default document (also installed at data/cocoreco.default.json).
const std::string& default_connectome_json();

// ---------------------------------------------------------------------------
// project: inter-area transfer. 1x1 conv to the destination channel count,
// then average pooling (forward; the spatial ratio must be integer) or
// bilinear upsampling (backward) to the destination size, scaled by the
// fixed ec weight.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> project(const Tensor<S>& src, int dst_channels, int dst_h, int dst_w,
                  EdgeDirection direction, const Tensor<S>& kernel1x1,
                  const Tensor<S>& bias, double ec_weight) {
    if (kernel1x1.ndim() != 4 || kernel1x1.dim(2) != 1 || kernel1x1.dim(3) != 1)
        throw shape_error("project: kernel must be a 1x1 conv [C,Cin,1,1], got " +
                          shape_str(kernel1x1.shape()));
    if (kernel1x1.dim(0) != dst_channels)
        throw shape_error("project: kernel emits " + std::to_string(kernel1x1.dim(0)) +
                          " channels, destination needs " + std::to_string(dst_channels));
    Tensor<S> y = conv2d(src, kernel1x1, bias, 1, 0);
    const auto g = detail::chw_of(y, "project");
    if (direction == EdgeDirection::forward) {
        if (g.h < dst_h || g.w < dst_w)
            throw shape_error("project: forward pass needs source spatial >= destination; got " +
                              shape_str(src.shape()) + " -> " + std::to_string(dst_h) + "x" +
                              std::to_string(dst_w));
        if (g.h % dst_h != 0 || g.w % dst_w != 0)
            throw value_error("project: non-integer pooling ratio " + std::to_string(g.h) +
                              "x" + std::to_string(g.w) + " -> " + std::to_string(dst_h) +
                              "x" + std::to_string(dst_w));
        const int rh = g.h / dst_h, rw = g.w / dst_w;
        if (rh != 1 || rw != 1)
            y = detail::pool_rect(y, PoolKind::avg, rh, rw, rh, rw, "project");
    } else {
        if (g.h > dst_h || g.w > dst_w)
            throw shape_error("project: backward pass needs source spatial <= destination; got " +
                              shape_str(src.shape()) + " -> " + std::to_string(dst_h) + "x" +
                              std::to_string(dst_w));
        if (g.h != dst_h || g.w != dst_w) y = upsample_bilinear2d(y, dst_h, dst_w);
    }
    if (ec_weight != 1.0) y = scale_channels(y, static_cast<S>(ec_weight));
    return y;
}

}  // namespace cocoreco
