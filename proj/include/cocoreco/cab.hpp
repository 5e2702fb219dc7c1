#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cocoreco/common.hpp"
#include "cocoreco/ops.hpp"
#include "cocoreco/tensor.hpp"

namespace cocoreco {

// ---------------------------------------------------------------------------
// Contextual attention: a parameter-free block that estimates a conditional
// co-occurrence map over feature channels, turns it into rectified and
// rescaled per-channel weights in [0,1], and fuses them back by element-wise
// addition: out_i = (1 + w_i) * F_i.
// ---------------------------------------------------------------------------

enum class CabOrientation { causes, effects };

struct CabConfig {
    double eps = 1e-8;
    CabOrientation orientation = CabOrientation::causes;
};

// c[i][j] estimates P(F_i | F_j) as p_i * p_j / (s_j + eps) after the whole
// stack is normalized by its global maximum. p/s hold the per-map maxima and
// sums the estimate was derived from.
template <typename S>
struct CausalityMap {
    int n = 0;
    Tensor<S> c;  // [n,n]; attached to the active tape when one is recording
    Tensor<S> p;  // [n] statistics (values only)
    Tensor<S> s;  // [n]
    S eps = S(0);
};

template <typename S>
CausalityMap<S> causality_map(const Tensor<S>& f, const CabConfig& cfg) {
    if (cfg.eps <= 0.0) throw value_error("causality_map: eps must be > 0");
    if (f.ndim() != 3)
        throw shape_error("causality_map: expected [n,H,W], got " + shape_str(f.shape()));
    const int n = f.dim(0), H = f.dim(1), W = f.dim(2);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const S eps = static_cast<S>(cfg.eps);

    for (std::size_t i = 0; i < f.size(); ++i)
        if (f.data()[i] < S(0))
            throw value_error("causality_map: negative input values (apply after relu)");

    CausalityMap<S> cm;
    cm.n = n;
    cm.eps = eps;
    cm.c = Tensor<S>::zeros({n, n});
    cm.p = Tensor<S>::zeros({n});
    cm.s = Tensor<S>::zeros({n});

    // global maximum and its first row-major position
    S g = f.data()[0];
    std::size_t gpos = 0;
    for (std::size_t i = 1; i < f.size(); ++i)
        if (f.data()[i] > g) {
            g = f.data()[i];
            gpos = i;
        }
    if (g <= eps) return cm;  // all-zero stack maps to the all-zero estimate

    auto argmax = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const S* ch = f.data() + static_cast<std::size_t>(i) * plane;
        std::size_t best = 0;
        S bv = ch[0], sum = ch[0];
        for (std::size_t e = 1; e < plane; ++e) {
            if (ch[e] > bv) {
                bv = ch[e];
                best = e;
            }
            sum += ch[e];
        }
        cm.p.data()[i] = bv / g;
        cm.s.data()[i] = sum / g;
        (*argmax)[static_cast<std::size_t>(i)] = best;
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            cm.c.data()[static_cast<std::size_t>(i) * n + j] =
                cm.p.data()[i] * cm.p.data()[j] / (cm.s.data()[j] + eps);
    detail::check_finite(cm.c, "causality_map");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&f})) {
        int pf = tp->parent_of(f);
        auto fi = f.impl();
        auto pv = std::make_shared<std::vector<S>>(cm.p.vec());
        auto sv = std::make_shared<std::vector<S>>(cm.s.vec());
        tp->record("causality_map", cm.c, {pf},
                   [=](const std::vector<S>& gc, Tape<S>& t) {
                       if (pf < 0) return;
                       // back through c = outer(p,p)/ (s+eps), the per-map
                       // max/sum statistics, and the global-max normalization
                       std::vector<S> dp(static_cast<std::size_t>(n), S(0));
                       std::vector<S> ds(static_cast<std::size_t>(n), S(0));
                       for (int k = 0; k < n; ++k) {
                           S row = S(0), col = S(0);
                           for (int j = 0; j < n; ++j) {
                               const S dj = (*sv)[static_cast<std::size_t>(j)] + eps;
                               row += gc[static_cast<std::size_t>(k) * n + j] *
                                      (*pv)[static_cast<std::size_t>(j)] / dj;
                               col += gc[static_cast<std::size_t>(j) * n + k] *
                                      (*pv)[static_cast<std::size_t>(j)];
                           }
                           const S dk = (*sv)[static_cast<std::size_t>(k)] + eps;
                           dp[static_cast<std::size_t>(k)] = row + col / dk;
                           ds[static_cast<std::size_t>(k)] =
                               -col * (*pv)[static_cast<std::size_t>(k)] / (dk * dk);
                       }
                       auto& gf = t.grad_buf(pf);
                       S gdot = S(0);  // sum of dL/dN * N for the global-max path
                       for (int k = 0; k < n; ++k) {
                           const S* ch = fi->data.data() + static_cast<std::size_t>(k) * plane;
                           S* gch = gf.data() + static_cast<std::size_t>(k) * plane;
                           const std::size_t am = (*argmax)[static_cast<std::size_t>(k)];
                           for (std::size_t e = 0; e < plane; ++e) {
                               const S dn = ds[static_cast<std::size_t>(k)] +
                                            (e == am ? dp[static_cast<std::size_t>(k)] : S(0));
                               gch[e] += dn / g;
                               gdot += dn * (ch[e] / g);
                           }
                       }
                       gf[gpos] -= gdot / g;
                   });
    }
    return cm;
}

// Rectified, rescaled weights: with orientation "causes", w_k is the mean of
// relu(c[j][k]) over j != k (how strongly map k conditions the others);
// "effects" swaps the indices. Clamped to [0,1] as a guard; n=1 yields [0].
template <typename S>
Tensor<S> attention_weights(const CausalityMap<S>& cm, const CabConfig& cfg) {
    const int n = cm.n;
    if (cm.c.ndim() != 2 || cm.c.dim(0) != n || cm.c.dim(1) != n)
        throw shape_error("attention_weights: malformed map " + shape_str(cm.c.shape()));
    if (n == 1) return Tensor<S>::zeros({1});

    const bool causes = cfg.orientation == CabOrientation::causes;
    Tensor<S> w = Tensor<S>::zeros({n});
    auto pass = std::make_shared<std::vector<char>>(static_cast<std::size_t>(n), 1);
    const S inv = S(1) / static_cast<S>(n - 1);
    for (int k = 0; k < n; ++k) {
        S acc = S(0);
        for (int j = 0; j < n; ++j) {
            if (j == k) continue;
            const S v = causes ? cm.c.data()[static_cast<std::size_t>(j) * n + k]
                               : cm.c.data()[static_cast<std::size_t>(k) * n + j];
            if (v > S(0)) acc += v;
        }
        S m = acc * inv;
        (*pass)[static_cast<std::size_t>(k)] = (m >= S(0) && m <= S(1)) ? 1 : 0;
        w.data()[k] = std::min(std::max(m, S(0)), S(1));
    }
    detail::check_finite(w, "attention_weights");

    Tape<S>* tp = Tape<S>::active();
    if (detail::want_record(tp, {&cm.c})) {
        int pc = tp->parent_of(cm.c);
        auto ci = cm.c.impl();
        tp->record("attention_weights", w, {pc},
                   [=](const std::vector<S>& gw, Tape<S>& t) {
                       if (pc < 0) return;
                       auto& gc = t.grad_buf(pc);
                       for (int k = 0; k < n; ++k) {
                           if (!(*pass)[static_cast<std::size_t>(k)]) continue;
                           const S g = gw[static_cast<std::size_t>(k)] * inv;
                           for (int j = 0; j < n; ++j) {
                               if (j == k) continue;
                               const std::size_t idx =
                                   causes ? static_cast<std::size_t>(j) * n + k
                                          : static_cast<std::size_t>(k) * n + j;
                               if (ci->data[idx] > S(0)) gc[idx] += g;
                           }
                       }
                   });
    }
    return w;
}

// F' = F + scale_channels(F, w), i.e. channel i scaled by (1 + w_i). Adds no
// trainable parameters; returns the map for the alignment loss.
template <typename S>
std::pair<Tensor<S>, CausalityMap<S>> apply_cab(const Tensor<S>& f,
                                                const CabConfig& cfg) {
    if (f.ndim() != 3)
        throw shape_error("apply_cab: expected [n,H,W], got " + shape_str(f.shape()));
    CausalityMap<S> cm = causality_map(f, cfg);
    Tensor<S> w = attention_weights(cm, cfg);
    Tensor<S> out = elementwise_add(f, scale_channels(f, w));
    return {out, cm};
}

template <typename S>
struct CabBatchResult {
    Tensor<S> output;                  // [B,n,H,W]
    std::vector<CausalityMap<S>> maps; // one per sample
};

// Batched application: every sample gets its own map and weights.
template <typename S>
CabBatchResult<S> apply_cab_batch(const Tensor<S>& x, const CabConfig& cfg) {
    if (x.ndim() != 4)
        throw shape_error("apply_cab_batch: expected [B,n,H,W], got " +
                          shape_str(x.shape()));
    const int B = x.dim(0);
    CabBatchResult<S> r;
    std::vector<Tensor<S>> outs;
    outs.reserve(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
        auto [out, cm] = apply_cab(detail::slice_batch(x, b), cfg);
        outs.push_back(std::move(out));
        r.maps.push_back(std::move(cm));
    }
    r.output = detail::stack_batch(outs);
    return r;
}

// Mean over samples of mse(sample map, within-batch mean map of its class).
// The class mean is a constant target; singleton classes contribute exactly 0.
template <typename S>
Tensor<S> minibatch_alignment_loss(
    const std::vector<std::pair<CausalityMap<S>, int>>& maps) {
    if (maps.empty())
        throw value_error("minibatch_alignment_loss: empty batch");
    const int n = maps.front().first.n;
    for (const auto& [cm, label] : maps)
        if (cm.n != n)
            throw value_error("minibatch_alignment_loss: mixed map sizes " +
                              std::to_string(n) + " vs " + std::to_string(cm.n));

    // class-mean targets from the map values
    std::vector<int> labels;
    for (const auto& [cm, label] : maps) labels.push_back(label);
    const std::size_t nn = static_cast<std::size_t>(n) * n;

    Tensor<S> total;
    bool first = true;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        std::vector<S> target(nn, S(0));
        int count = 0;
        for (std::size_t j = 0; j < maps.size(); ++j) {
            if (labels[j] != labels[i]) continue;
            ++count;
            for (std::size_t e = 0; e < nn; ++e)
                target[e] += maps[j].first.c.data()[e];
        }
        for (std::size_t e = 0; e < nn; ++e) target[e] /= static_cast<S>(count);
        Tensor<S> term = mse_loss(maps[i].first.c,
                                  Tensor<S>::from({n, n}, std::move(target)),
                                  /*treat_b_constant=*/true);
        total = first ? term : elementwise_add(total, term);
        first = false;
    }
    return scale_channels(total, S(1) / static_cast<S>(maps.size()));
}

}  // namespace cocoreco
