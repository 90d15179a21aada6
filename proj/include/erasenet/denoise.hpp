#pragma once

// Inference over whole images: page mode (pad, forward, crop) and patch mode
// (256 tiles, stitched), with optional orientation averaging and sharpening.

#include "erasenet/image.hpp"
#include "erasenet/metrics.hpp"
#include "erasenet/model.hpp"

namespace erasenet {

enum class DenoiseMode { Page, Patch };

struct DenoiseOptions {
  DenoiseMode mode = DenoiseMode::Page;
  bool orient_avg = false;
  bool sharpen = false;
};

inline ImageBuffer forward_image(ModelGraph<float>& model, const ImageBuffer& img) {
  NoGradGuard guard;
  return to_image(model.forward(to_tensor<float>(img), Mode::Infer));
}

/// Pads by edge replication to the model's multiple, runs once, crops back.
inline ImageBuffer denoise_page(ModelGraph<float>& model, const ImageBuffer& img) {
  const auto padded = pad_to_multiple(img, model.architecture().required_multiple());
  return crop(forward_image(model, padded.image), padded.orig_h, padded.orig_w);
}

/// Pads to whole tiles, denoises each 256x256 tile alone, stitches, crops.
inline ImageBuffer denoise_patches(ModelGraph<float>& model, const ImageBuffer& img) {
  const auto padded = pad_to_multiple(img, kPatchSize);
  auto tiles = tile_image(padded.image, kPatchSize);
  for (auto& p : tiles.patches) p = forward_image(model, p);
  return crop(stitch_patches(tiles), padded.orig_h, padded.orig_w);
}

/// Orientation averaging first, then sharpening.
inline ImageBuffer denoise(ModelGraph<float>& model, const ImageBuffer& img, const DenoiseOptions& opt = {}) {
  DenoiseFn run = [&](const ImageBuffer& x) {
    return opt.mode == DenoiseMode::Page ? denoise_page(model, x) : denoise_patches(model, x);
  };
  ImageBuffer out = opt.orient_avg ? multi_orientation(img, run) : run(img);
  return opt.sharpen ? sharpen(out) : out;
}

}  // namespace erasenet
