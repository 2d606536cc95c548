// Plain double matrices for traces and the analysis toolkit. These are
// detached snapshots, never part of an autodiff graph.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace reslab {

struct Mat {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int64_t r, int64_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  Mat(int64_t r, int64_t c, std::vector<double> data)
      : rows(r), cols(c), v(std::move(data)) {}

  double& operator()(int64_t r, int64_t c) { return v[r * cols + c]; }
  double operator()(int64_t r, int64_t c) const { return v[r * cols + c]; }
  bool empty() const { return v.empty(); }
};

// Captured per-layer state for the analysis suite.
struct LayerTraceEntry {
  Mat attn_avg;                 // head-averaged attention matrix A_n
  std::vector<Mat> attn_heads;  // per-head, only when requested
  Mat v_pre;                    // value before the residual policy
  Mat v_post;                   // value after the residual policy
  Mat u;                        // attention output U_n (pre W^O)
  Mat h;                        // block output H_n
  bool negative_attn = false;   // attention-site residual produced negatives
};

struct LayerTrace {
  std::vector<uint32_t> tokens;
  Mat h0;  // embeddings
  std::vector<LayerTraceEntry> layers;
};

struct TraceOptions {
  bool capture = false;
  bool per_head = false;
};

}  // namespace reslab
