#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gppvae/tensor.hpp"

namespace gppvae {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

enum class NetKind { conv, mlp };

// Architecture descriptor carried in checkpoints. cond_dim > 0 appends view
// features at both network inputs (conditional variant).
struct ArchDescriptor {
  NetKind kind = NetKind::conv;
  std::size_t image_channels = 1;
  std::size_t image_size = 28;
  std::size_t latent = 16;
  std::size_t hidden = 256;  // mlp only
  std::size_t cond_dim = 0;

  std::size_t pixels() const { return image_channels * image_size * image_size; }
  bool operator==(const ArchDescriptor&) const = default;
};

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
// B x D view features to constant B x D x S x S channel planes
Tensor cond_planes(const Tensor& cond, std::size_t size);

// z = mu + eps (*) exp(0.5 log_var); gradient reaches mu and log_var only.
Tensor reparameterize(const Tensor& mu, const Tensor& log_var, const Tensor& eps);

// conv: conv(C -> 8, 3x3, s2, p1) relu, conv(8 -> 16, 3x3, s2, p1) relu,
// then separate affine heads for means and log variances (no activation).
// mlp: K -> hidden -> heads.
class EncoderNet {
 public:
  EncoderNet() = default;
  static EncoderNet create(const ArchDescriptor& arch, Rng& rng);

  // returns (mu, log_var), each batch x L
  std::pair<Tensor, Tensor> forward(const Tensor& images, const Tensor& cond = {}) const;
  ParamList params() const;
  const ArchDescriptor& arch() const { return arch_; }

 private:
  ArchDescriptor arch_;
  std::map<std::string, Tensor> p_;
  friend class Checkpoint;
};

// mirror of the encoder: dense to 16 x (S/4) x (S/4), two transposed convs,
// final sigmoid so outputs live in [0, 1].
class DecoderNet {
 public:
  DecoderNet() = default;
  static DecoderNet create(const ArchDescriptor& arch, Rng& rng);

  Tensor forward(const Tensor& z, const Tensor& cond = {}) const;
  ParamList params() const;
  const ArchDescriptor& arch() const { return arch_; }

 private:
  ArchDescriptor arch_;
  std::map<std::string, Tensor> p_;
  friend class Checkpoint;
};

}  // namespace gppvae
