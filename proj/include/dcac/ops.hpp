#pragma once

#include <vector>

#include "dcac/autodiff.hpp"

namespace dcac {

// ---- graph ops ------------------------------------------------------------
// Feature maps are [B, C, (D,) H, W]; vectors are [B, F].

// Cubic-kernel convolution; kernel size comes from the weight shape
// [Cout, Cin, k, k(, k)], padding = k/2 on every spatial axis.
VarPtr conv(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride);

// Transposed convolution, kernel 2 stride 2 (exact spatial doubling);
// weight [Cin, Cout, 2, 2(, 2)].
VarPtr conv_transpose(const VarPtr& x, const VarPtr& w, const VarPtr& b);

VarPtr instance_norm(const VarPtr& x, const VarPtr& gamma, const VarPtr& beta, float eps);
VarPtr leaky_relu(const VarPtr& x, float slope);
VarPtr concat_channels(const VarPtr& a, const VarPtr& b);
VarPtr global_avg_pool(const VarPtr& x);  // [B,C,spatial] -> [B,C]

VarPtr linear(const VarPtr& x, const VarPtr& w, const VarPtr& b);  // [B,I],[O,I],[O] -> [B,O]
VarPtr concat_features(const std::vector<VarPtr>& xs);             // [B,Fi] -> [B,sum Fi]

VarPtr softmax_vec(const VarPtr& x);       // softmax over the last axis of [B,K]
VarPtr softmax_channels(const VarPtr& x);  // per-voxel softmax over C of [B,C,spatial]

// Gradient barrier: value passes through, no gradient flows to parents.
VarPtr detach(const VarPtr& x);

VarPtr slice_cols(const VarPtr& x, int from, int len);  // [B,L] -> [B,len]

// Per-sample per-voxel affine map (a 1x1 dynamic convolution).
// x [B,Cin,spatial]; wb [B, Cout*Cin + Cout] laid out weights-then-bias;
// returns [B,Cout,spatial]. Gradients flow into both x and wb.
VarPtr dynamic_affine(const VarPtr& x, const VarPtr& wb, int out_channels);

VarPtr add(const VarPtr& a, const VarPtr& b);
VarPtr sub(const VarPtr& a, const VarPtr& b);
VarPtr scale(const VarPtr& x, float s);
VarPtr add_weighted(const std::vector<VarPtr>& scalars, const std::vector<double>& weights);

// ---- plain tensor utilities (no autodiff) ----------------------------------

// Symmetric zero-padding of spatial axes up to the next multiple of `multiple`,
// and the matching crop. pad_lo receives the low-side offsets used.
Tensor pad_spatial_to_multiple(const Tensor& x, int multiple, std::vector<int>& pad_lo);
Tensor crop_spatial(const Tensor& x, const std::vector<int>& pad_lo, const std::vector<int>& target_spatial);

// Nearest-neighbour downsample of a label map [B, spatial...] by integer factor.
Tensor nn_downsample(const Tensor& mask, int factor);

// One-hot channel expansion of an integer-valued label map [B, spatial] -> [B,C,spatial].
Tensor one_hot_channels(const Tensor& mask, int num_classes);

}  // namespace dcac
