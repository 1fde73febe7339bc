#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "alignps/autodiff.hpp"
#include "alignps/ops.hpp"
#include "alignps/random.hpp"

namespace alignps {

/// Identity-matching memory: a lookup table with one feature center per
/// labeled identity and a circular queue of unlabeled-person features. The
/// math treats both as D-column collections (v_i, u_k); storage is row-major
/// with one entry per row. Entries stay unit-norm; updates happen strictly
/// between optimizer steps (single writer), reads during loss computation.
template <typename T>
struct ReidMemoryT {
  TensorT<T> lut;    // L x D
  TensorT<T> queue;  // Q x D
  int queue_head = 0;
  T momentum = T(0.5);     // LUT blend factor (1 freezes the LUT)
  T temperature = T(0.1);  // softmax temperature, inside the exponent

  int num_labeled() const { return lut.ndim() == 2 ? lut.dim(0) : 0; }
  int queue_size() const { return queue.ndim() == 2 ? queue.dim(0) : 0; }
  int dim() const { return lut.ndim() == 2 ? lut.dim(1) : 0; }

  static ReidMemoryT random_init(int labeled, int queue_slots, int d, Rng &rng) {
    ReidMemoryT m;
    m.lut = TensorT<T>({labeled, d});
    m.queue = TensorT<T>({queue_slots, d});
    auto fill_unit_rows = [&](TensorT<T> &t) {
      for (int i = 0; i < t.dim(0); ++i) {
        T norm = T(0);
        T *row = &t.at2(i, 0);
        for (int j = 0; j < d; ++j) {
          row[j] = static_cast<T>(rng.normal());
          norm += row[j] * row[j];
        }
        const T inv = T(1) / std::sqrt(norm);
        for (int j = 0; j < d; ++j) row[j] *= inv;
      }
    };
    fill_unit_rows(m.lut);
    fill_unit_rows(m.queue);
    return m;
  }
};

using ReidMemory = ReidMemoryT<float>;

/// Unit-norm embeddings at grid locations: gather channel vectors from the
/// map and L2-normalize each row. No learned projection is applied.
template <typename T>
Var<T> extract_embeddings(const Var<T> &map, const std::vector<GridLoc> &locs) {
  return l2_normalize_rows(gather_locations(map, locs));
}

/// Value-only variant for inference paths.
template <typename T>
std::vector<T> embedding_at(const TensorT<T> &map, int n, int y, int x) {
  const int d = map.dim(1);
  std::vector<T> out(static_cast<size_t>(d));
  T norm = T(0);
  for (int c = 0; c < d; ++c) {
    out[static_cast<size_t>(c)] = map.at4(n, c, y, x);
    norm += out[static_cast<size_t>(c)] * out[static_cast<size_t>(c)];
  }
  const T inv = T(1) / (std::sqrt(norm) + T(1e-12));
  for (T &v : out) v *= inv;
  return out;
}

/// Probability that embedding x belongs to labeled identity i: a softmax at
/// temperature tau over similarities to every LUT center and queue entry.
/// Computed via a shifted log-sum-exp so extreme temperatures stay finite.
template <typename T>
T oim_probability(const std::vector<T> &x, const ReidMemoryT<T> &mem, int identity) {
  const int l = mem.num_labeled(), q = mem.queue_size(), d = mem.dim();
  APS_CHECK(static_cast<int>(x.size()) == d, "oim_probability: dimension mismatch");
  APS_CHECK(identity >= 0 && identity < l, "oim_probability: identity out of range");
  std::vector<T> logits(static_cast<size_t>(l + q));
  for (int i = 0; i < l + q; ++i) {
    const T *row = i < l ? &mem.lut.at2(i, 0) : &mem.queue.at2(i - l, 0);
    T dot = T(0);
    for (int j = 0; j < d; ++j) dot += row[j] * x[static_cast<size_t>(j)];
    logits[static_cast<size_t>(i)] = dot / mem.temperature;
  }
  const T zmax = *std::max_element(logits.begin(), logits.end());
  T denom = T(0);
  for (T z : logits) denom += std::exp(z - zmax);
  return std::exp(logits[static_cast<size_t>(identity)] - zmax) / denom;
}

/// OIM loss: mean over labeled embeddings of -log p_t, where p_t is the
/// softmax over LUT+queue similarities. focal=true weights each term by
/// (1-p_t)^gamma. Memory entries are treated as constants (no gradient).
///
/// Backward uses d(-log p_t)/dz_j = p_j - [j==t] scaled by the focal chain
/// factor A = (1-p_t)^gamma - gamma*(1-p_t)^(gamma-1) * p_t * log(p_t)
/// (A = 1 when focal is off), i.e. dL/dz_j = A * (p_j - [j==t]).
template <typename T>
Var<T> oim_loss(const Var<T> &feats, const std::vector<int> &ids, const ReidMemoryT<T> &mem,
                bool focal, T gamma = T(2)) {
  const int k = feats->value.dim(0), d = feats->value.dim(1);
  APS_CHECK(static_cast<int>(ids.size()) == k, "oim_loss: id count mismatch");
  const int l = mem.num_labeled(), q = mem.queue_size();
  APS_CHECK(mem.dim() == d, "oim_loss: embedding dimension mismatch");
  if (k == 0) return make_const<T>(TensorT<T>::scalar(T(0)));

  // Snapshot the memory matrix: the graph must see the values from loss
  // time even though the memory mutates after the optimizer step.
  auto m = std::make_shared<TensorT<T>>(TensorT<T>({l + q, d}));
  for (int i = 0; i < l; ++i)
    std::copy(&mem.lut.at2(i, 0), &mem.lut.at2(i, 0) + d, &m->at2(i, 0));
  for (int i = 0; i < q; ++i)
    std::copy(&mem.queue.at2(i, 0), &mem.queue.at2(i, 0) + d, &m->at2(l + i, 0));

  const T inv_tau = T(1) / mem.temperature;
  auto probs = std::make_shared<TensorT<T>>(TensorT<T>({k, l + q}));
  auto pt = std::make_shared<std::vector<T>>(static_cast<size_t>(k));
  auto log_pt = std::make_shared<std::vector<T>>(static_cast<size_t>(k));
  T acc = T(0);
  for (int i = 0; i < k; ++i) {
    const int t = ids[static_cast<size_t>(i)];
    APS_CHECK(t >= 0 && t < l, "oim_loss: identity out of range");
    T zmax = -std::numeric_limits<T>::infinity();
    std::vector<T> z(static_cast<size_t>(l + q));
    for (int j = 0; j < l + q; ++j) {
      T dot = T(0);
      const T *row = &m->at2(j, 0);
      const T *xr = &feats->value.at2(i, 0);
      for (int c = 0; c < d; ++c) dot += row[c] * xr[c];
      z[static_cast<size_t>(j)] = dot * inv_tau;
      zmax = std::max(zmax, z[static_cast<size_t>(j)]);
    }
    T denom = T(0);
    for (int j = 0; j < l + q; ++j) denom += std::exp(z[static_cast<size_t>(j)] - zmax);
    const T lse = zmax + std::log(denom);
    for (int j = 0; j < l + q; ++j)
      probs->at2(i, j) = std::exp(z[static_cast<size_t>(j)] - lse);
    const T lp = z[static_cast<size_t>(t)] - lse;
    (*log_pt)[static_cast<size_t>(i)] = lp;
    (*pt)[static_cast<size_t>(i)] = std::exp(lp);
    const T w = focal ? std::pow(T(1) - (*pt)[static_cast<size_t>(i)], gamma) : T(1);
    acc += -w * lp;
  }
  acc /= static_cast<T>(k);

  return make_op<T>(
      TensorT<T>::scalar(acc), {feats},
      [feats, m, probs, pt, log_pt, ids, focal, gamma, inv_tau, k, l, q, d](VarNode<T> &self) {
        if (!feats->requires_grad) return;
        const T g = self.grad[0] / static_cast<T>(k);
        for (int i = 0; i < k; ++i) {
          const int t = ids[static_cast<size_t>(i)];
          const T p = (*pt)[static_cast<size_t>(i)];
          const T lp = (*log_pt)[static_cast<size_t>(i)];
          T a = T(1);
          if (focal)
            a = std::pow(T(1) - p, gamma) - gamma * std::pow(T(1) - p, gamma - T(1)) * p * lp;
          T *gx = &feats->grad_buf().at2(i, 0);
          for (int j = 0; j < l + q; ++j) {
            const T dz = a * ((*probs).at2(i, j) - (j == t ? T(1) : T(0))) * g;
            if (dz == T(0)) continue;
            const T *row = &m->at2(j, 0);
            for (int c = 0; c < d; ++c) gx[c] += dz * row[c] * inv_tau;
          }
        }
      });
}

/// Momentum-update the LUT center of each labeled feature and push each
/// unlabeled feature into the circular queue (oldest slot overwritten).
/// Rows are re-normalized so the unit-norm invariant holds.
template <typename T>
void update_memory(ReidMemoryT<T> &mem, const std::vector<std::pair<int, std::vector<T>>> &labeled,
                   const std::vector<std::vector<T>> &unlabeled) {
  const int d = mem.dim();
  for (const auto &[id, x] : labeled) {
    APS_CHECK(id >= 0 && id < mem.num_labeled(), "update_memory: identity out of range");
    APS_CHECK(static_cast<int>(x.size()) == d, "update_memory: dimension mismatch");
    T *row = &mem.lut.at2(id, 0);
    T norm = T(0);
    for (int j = 0; j < d; ++j) {
      row[j] = mem.momentum * row[j] + (T(1) - mem.momentum) * x[static_cast<size_t>(j)];
      norm += row[j] * row[j];
    }
    const T inv = T(1) / (std::sqrt(norm) + T(1e-12));
    for (int j = 0; j < d; ++j) row[j] *= inv;
  }
  for (const auto &x : unlabeled) {
    if (mem.queue_size() == 0) break;
    APS_CHECK(static_cast<int>(x.size()) == d, "update_memory: dimension mismatch");
    T *row = &mem.queue.at2(mem.queue_head, 0);
    T norm = T(0);
    for (int j = 0; j < d; ++j) norm += x[static_cast<size_t>(j)] * x[static_cast<size_t>(j)];
    const T inv = T(1) / (std::sqrt(norm) + T(1e-12));
    for (int j = 0; j < d; ++j) row[j] = x[static_cast<size_t>(j)] * inv;
    mem.queue_head = (mem.queue_head + 1) % mem.queue_size();
  }
}

/// Grouping of embedding rows into per-identity candidate sets. Row indices
/// refer to the K x D feature matrix handed to triplet_loss; lut_row < 0
/// means the set carries no memory center (unknown id or LUT disabled).
struct TripletSets {
  std::vector<std::vector<int>> feat_rows;
  std::vector<int> lut_rows;
};

/// Batch-hard triplet loss over candidate sets: every element (sampled
/// features and, when present, the LUT center) acts as an anchor; its
/// hardest positive is the farthest element of its own set, its hardest
/// negative the closest element of any other set; each anchor contributes
/// hinge max(0, margin + D_pos - D_neg), and the loss is the sum. Anchors
/// without a positive partner (singleton sets) are skipped; fewer than two
/// sets yield zero. LUT rows are constants — gradients reach only `feats`.
template <typename T>
Var<T> triplet_loss(const Var<T> &feats, const TripletSets &sets, const TensorT<T> &lut,
                    T margin) {
  const int d = feats->value.dim(0) > 0 ? feats->value.dim(1) : lut.dim(1);
  struct Elem {
    int set = 0;
    int feat_row = -1;  // else LUT entry
    const T *ptr = nullptr;
  };
  auto elems = std::make_shared<std::vector<Elem>>();
  auto lut_copy = std::make_shared<TensorT<T>>(lut);
  for (size_t s = 0; s < sets.feat_rows.size(); ++s) {
    for (int r : sets.feat_rows[s])
      elems->push_back({static_cast<int>(s), r, nullptr});
    if (s < sets.lut_rows.size() && sets.lut_rows[s] >= 0)
      elems->push_back({static_cast<int>(s), -1 - sets.lut_rows[s], nullptr});
  }
  const int ne = static_cast<int>(elems->size());
  int nsets = static_cast<int>(sets.feat_rows.size());
  if (nsets < 2 || ne == 0) return make_const<T>(TensorT<T>::scalar(T(0)));

  auto row_of = [&](const Elem &e) -> const T * {
    return e.feat_row >= 0 ? &feats->value.at2(e.feat_row, 0) : &lut_copy->at2(-1 - e.feat_row, 0);
  };
  auto dist = [&](const Elem &a, const Elem &b) {
    const T *pa = row_of(a), *pb = row_of(b);
    T s = T(0);
    for (int j = 0; j < d; ++j) {
      const T df = pa[j] - pb[j];
      s += df * df;
    }
    return std::sqrt(s);
  };

  // Hard mining: record the chosen (anchor, pos, neg) triples for backward.
  struct Triple {
    int a, p, n;
    T dpos, dneg;
  };
  auto triples = std::make_shared<std::vector<Triple>>();
  T acc = T(0);
  for (int a = 0; a < ne; ++a) {
    int best_p = -1, best_n = -1;
    T dpos = T(-1), dneg = T(0);
    for (int o = 0; o < ne; ++o) {
      if (o == a) continue;
      const T dd = dist((*elems)[static_cast<size_t>(a)], (*elems)[static_cast<size_t>(o)]);
      if ((*elems)[static_cast<size_t>(o)].set == (*elems)[static_cast<size_t>(a)].set) {
        if (dd > dpos) {
          dpos = dd;
          best_p = o;
        }
      } else if (best_n < 0 || dd < dneg) {
        dneg = dd;
        best_n = o;
      }
    }
    if (best_p < 0 || best_n < 0) continue;
    const T hinge = margin + dpos - dneg;
    if (hinge > T(0)) {
      acc += hinge;
      triples->push_back({a, best_p, best_n, dpos, dneg});
    }
  }

  return make_op<T>(
      TensorT<T>::scalar(acc), {feats},
      [feats, elems, lut_copy, triples, d](VarNode<T> &self) {
        if (!feats->requires_grad) return;
        const T g = self.grad[0];
        auto row_of = [&](const Elem &e) -> const T * {
          return e.feat_row >= 0 ? &feats->value.at2(e.feat_row, 0)
                                 : &lut_copy->at2(-1 - e.feat_row, 0);
        };
        auto add_pair_grad = [&](const Elem &u, const Elem &v, T coeff, T dd) {
          // d dist(u,v) / du = (u - v)/dist; scatter into feat rows only.
          if (dd <= T(1e-12)) return;
          const T *pu = row_of(u), *pv = row_of(v);
          const T c = coeff / dd;
          if (u.feat_row >= 0) {
            T *gu = &feats->grad_buf().at2(u.feat_row, 0);
            for (int j = 0; j < d; ++j) gu[j] += c * (pu[j] - pv[j]);
          }
          if (v.feat_row >= 0) {
            T *gv = &feats->grad_buf().at2(v.feat_row, 0);
            for (int j = 0; j < d; ++j) gv[j] += c * (pv[j] - pu[j]);
          }
        };
        for (const Triple &t : *triples) {
          add_pair_grad((*elems)[static_cast<size_t>(t.a)], (*elems)[static_cast<size_t>(t.p)],
                        g, t.dpos);
          add_pair_grad((*elems)[static_cast<size_t>(t.a)], (*elems)[static_cast<size_t>(t.n)],
                        -g, t.dneg);
        }
      });
}

}  // namespace alignps
