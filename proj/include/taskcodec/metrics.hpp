#pragma once

#include "taskcodec/tensor.hpp"

namespace taskcodec {

// Image quality metrics over float tensors holding values in [0,1].
// Accumulation is in double with a fixed order, so results are reproducible
// bit for bit. Tensors may be [C,H,W] or [N,C,H,W].

double mse_value(const Tensor& a, const Tensor& b);

// Peak signal-to-noise ratio against peak 1.0, capped at 100 dB (the cap
// covers identical inputs, where the ratio is infinite).
double psnr(const Tensor& a, const Tensor& b);

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1=0.01^2,
// C2=0.03^2, windows fully inside the image, averaged over channels.
double ssim(const Tensor& a, const Tensor& b);

// Multi-scale SSIM over `scales` levels (default 3). Canonical weights
// {0.0448, 0.2856, 0.3001, ...} truncated and renormalized to sum 1;
// downsampling is 2x2 mean pooling. Levels above the first contribute the
// contrast-structure term; the coarsest level contributes luminance as
// well, so scales=1 reduces exactly to ssim().
double ms_ssim(const Tensor& a, const Tensor& b, int scales = 3);

// 8 * bytes / pixels: the rate of an actual encoded representation.
double bpp_actual(size_t bytes, int height, int width);

// rate_bits / pixels for a model's estimated rate.
double bpp_estimate(double rate_bits, int height, int width);

}  // namespace taskcodec
