#pragma once

#include <vector>

#include "mmc/tensor.hpp"

namespace mmc {

// Differentiable operations. Every op evaluates eagerly and records itself
// on the tape only when some input requires a gradient; the output then
// requires a gradient too. Shapes follow NCHW for images / feature maps.

// Cross-correlation. x: NCHW, w: OIKK, b: O. Output spatial extent is
// floor((in + 2*pad - k) / stride) + 1.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int pad);

Tensor relu(Tape& tape, const Tensor& x);

// Spatial mean per channel, NCHW -> NC.
Tensor gap(Tape& tape, const Tensor& x);

// v: N x C_in, w: C_out x C_in, optional bias C_out. Returns N x C_out.
Tensor linear(Tape& tape, const Tensor& v, const Tensor& w);
Tensor linear(Tape& tape, const Tensor& v, const Tensor& w, const Tensor& b);

// Per-pixel product with a one-channel map broadcast over channels.
// x: NCHW, h: N1HW.
Tensor mul_broadcast(Tape& tape, const Tensor& x, const Tensor& h);

// (m - min) / (max - min + eps), computed over all elements. Min/max
// subgradients route to the first row-major arg-extremum; with
// detach_extrema the extrema are treated as constants.
Tensor minmax_normalize(Tape& tape, const Tensor& m, double eps = 1e-12,
                        bool detach_extrema = false);

// Half-pixel bilinear sampling of a rank-2 map to out_h x out_w.
Tensor bilinear_resize(Tape& tape, const Tensor& m, int out_h, int out_w);

// Mean over the batch of -log softmax(logits)[label]. logits: NC.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& labels);

// Sum of squared differences over all elements.
Tensor sq_l2(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double s);
Tensor sum(Tape& tape, const Tensor& x);

// Row r of an NC matrix as a C vector.
Tensor row(Tape& tape, const Tensor& x, int r);

// Image n of an NCHW batch as a CHW tensor.
Tensor select_image(Tape& tape, const Tensor& x, int n);

// Stack rank-2 maps of identical extent into N1HW.
Tensor stack_maps(Tape& tape, const std::vector<Tensor>& maps);

}  // namespace mmc
