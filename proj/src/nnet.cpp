#include "gppvae/nnet.hpp"

#include <cmath>
#include <stdexcept>

namespace gppvae {

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

Tensor cond_planes(const Tensor& cond, std::size_t size) {
  std::size_t batch = cond.extent(0), d = cond.extent(1);
  Tensor planes = Tensor::zeros({batch, d, size, size});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < d; ++c) {
      double v = cond.at({n, c});
      double* dst = planes.data() + (n * d + c) * size * size;
      for (std::size_t i = 0; i < size * size; ++i) dst[i] = v;
    }
  return planes;
}

Tensor reparameterize(const Tensor& mu, const Tensor& log_var, const Tensor& eps) {
  if (mu.shape() != log_var.shape() || mu.shape() != eps.shape())
    throw std::invalid_argument("reparameterize: shapes disagree: " + shape_str(mu.shape()) +
                                ", " + shape_str(log_var.shape()) + ", " +
                                shape_str(eps.shape()));
  return add(mu, mul(eps.detach(), exp(scale(log_var, 0.5))));
}

// uniform +-sqrt(6 / (fan_in + fan_out)), biases zero
static Tensor glorot(Shape s, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::uniform(std::move(s), -limit, limit, rng);
}

static ParamList collect(const std::string& prefix, const std::map<std::string, Tensor>& p) {
  ParamList out;
  out.reserve(p.size());
  for (const auto& [name, t] : p) out.push_back({prefix + name, t});
  return out;
}

static void check_divisible(const ArchDescriptor& a) {
  if (a.kind == NetKind::conv && a.image_size % 4 != 0)
    throw std::invalid_argument("conv architecture needs image size divisible by 4, got " +
                                std::to_string(a.image_size));
}

EncoderNet EncoderNet::create(const ArchDescriptor& arch, Rng& rng) {
  check_divisible(arch);
  EncoderNet net;
  net.arch_ = arch;
  std::size_t L = arch.latent;
  if (arch.kind == NetKind::conv) {
    std::size_t c_in = arch.image_channels + arch.cond_dim;
    std::size_t s4 = arch.image_size / 4;
    std::size_t flat = 16 * s4 * s4 + arch.cond_dim;
    net.p_["conv1.w"] = glorot({8, c_in, 3, 3}, c_in * 9, 8 * 9, rng);
    net.p_["conv1.b"] = Tensor::zeros({8});
    net.p_["conv2.w"] = glorot({16, 8, 3, 3}, 8 * 9, 16 * 9, rng);
    net.p_["conv2.b"] = Tensor::zeros({16});
    net.p_["mu.w"] = glorot({flat, L}, flat, L, rng);
    net.p_["mu.b"] = Tensor::zeros({L});
    net.p_["logvar.w"] = glorot({flat, L}, flat, L, rng);
    net.p_["logvar.b"] = Tensor::zeros({L});
  } else {
    std::size_t in = arch.pixels() + arch.cond_dim;
    net.p_["fc1.w"] = glorot({in, arch.hidden}, in, arch.hidden, rng);
    net.p_["fc1.b"] = Tensor::zeros({arch.hidden});
    net.p_["mu.w"] = glorot({arch.hidden, L}, arch.hidden, L, rng);
    net.p_["mu.b"] = Tensor::zeros({L});
    net.p_["logvar.w"] = glorot({arch.hidden, L}, arch.hidden, L, rng);
    net.p_["logvar.b"] = Tensor::zeros({L});
  }
  for (auto& [_, t] : net.p_) t.set_requires_grad();
  return net;
}

std::pair<Tensor, Tensor> EncoderNet::forward(const Tensor& images, const Tensor& cond) const {
  if (images.ndim() != 4 || images.extent(1) != arch_.image_channels ||
      images.extent(2) != arch_.image_size || images.extent(3) != arch_.image_size)
    throw std::invalid_argument("encoder: expected images (b," +
                                std::to_string(arch_.image_channels) + "," +
                                std::to_string(arch_.image_size) + "," +
                                std::to_string(arch_.image_size) + "), got " +
                                shape_str(images.shape()));
  if (arch_.cond_dim > 0 &&
      (!cond.defined() || cond.ndim() != 2 || cond.extent(0) != images.extent(0) ||
       cond.extent(1) != arch_.cond_dim))
    throw std::invalid_argument("encoder: conditioning of shape (b," +
                                std::to_string(arch_.cond_dim) + ") required");
  std::size_t batch = images.extent(0);

  Tensor flat;
  if (arch_.kind == NetKind::conv) {
    Tensor x = images;
    if (arch_.cond_dim > 0) x = concat_chans(x, cond_planes(cond, arch_.image_size));
    Tensor h = relu(conv2d(x, p_.at("conv1.w"), p_.at("conv1.b")));
    h = relu(conv2d(h, p_.at("conv2.w"), p_.at("conv2.b")));
    std::size_t s4 = arch_.image_size / 4;
    flat = reshape(h, {batch, 16 * s4 * s4});
    if (arch_.cond_dim > 0) flat = concat_cols(flat, cond);
  } else {
    flat = reshape(images, {batch, arch_.pixels()});
    if (arch_.cond_dim > 0) flat = concat_cols(flat, cond);
    flat = relu(affine(flat, p_.at("fc1.w"), p_.at("fc1.b")));
  }
  Tensor mu = affine(flat, p_.at("mu.w"), p_.at("mu.b"));
  Tensor log_var = affine(flat, p_.at("logvar.w"), p_.at("logvar.b"));
  return {mu, log_var};
}

ParamList EncoderNet::params() const { return collect("enc.", p_); }

DecoderNet DecoderNet::create(const ArchDescriptor& arch, Rng& rng) {
  check_divisible(arch);
  DecoderNet net;
  net.arch_ = arch;
  std::size_t L = arch.latent;
  if (arch.kind == NetKind::conv) {
    std::size_t s4 = arch.image_size / 4;
    std::size_t flat = 16 * s4 * s4;
    std::size_t zin = L + arch.cond_dim;
    std::size_t ct1_in = 16 + arch.cond_dim;
    net.p_["fc.w"] = glorot({zin, flat}, zin, flat, rng);
    net.p_["fc.b"] = Tensor::zeros({flat});
    net.p_["convt1.w"] = glorot({ct1_in, 8, 3, 3}, ct1_in * 9, 8 * 9, rng);
    net.p_["convt1.b"] = Tensor::zeros({8});
    net.p_["convt2.w"] =
        glorot({8, arch.image_channels, 3, 3}, 8 * 9, arch.image_channels * 9, rng);
    net.p_["convt2.b"] = Tensor::zeros({arch.image_channels});
  } else {
    std::size_t zin = L + arch.cond_dim;
    net.p_["fc1.w"] = glorot({zin, arch.hidden}, zin, arch.hidden, rng);
    net.p_["fc1.b"] = Tensor::zeros({arch.hidden});
    net.p_["fc2.w"] = glorot({arch.hidden, arch.pixels()}, arch.hidden, arch.pixels(), rng);
    net.p_["fc2.b"] = Tensor::zeros({arch.pixels()});
  }
  for (auto& [_, t] : net.p_) t.set_requires_grad();
  return net;
}

Tensor DecoderNet::forward(const Tensor& z, const Tensor& cond) const {
  if (z.ndim() != 2 || z.extent(1) != arch_.latent)
    throw std::invalid_argument("decoder: expected latents (b," +
                                std::to_string(arch_.latent) + "), got " +
                                shape_str(z.shape()));
  if (arch_.cond_dim > 0 &&
      (!cond.defined() || cond.ndim() != 2 || cond.extent(0) != z.extent(0) ||
       cond.extent(1) != arch_.cond_dim))
    throw std::invalid_argument("decoder: conditioning of shape (b," +
                                std::to_string(arch_.cond_dim) + ") required");
  std::size_t batch = z.extent(0);

  Tensor zin = arch_.cond_dim > 0 ? concat_cols(z, cond) : z;
  if (arch_.kind == NetKind::conv) {
    std::size_t s4 = arch_.image_size / 4;
    Tensor h = relu(affine(zin, p_.at("fc.w"), p_.at("fc.b")));
    Tensor grid = reshape(h, {batch, 16, s4, s4});
    if (arch_.cond_dim > 0) grid = concat_chans(grid, cond_planes(cond, s4));
    Tensor u = relu(conv2d_transpose(grid, p_.at("convt1.w"), p_.at("convt1.b")));
    return sigmoid(conv2d_transpose(u, p_.at("convt2.w"), p_.at("convt2.b")));
  }
  Tensor h = relu(affine(zin, p_.at("fc1.w"), p_.at("fc1.b")));
  Tensor flat = sigmoid(affine(h, p_.at("fc2.w"), p_.at("fc2.b")));
  return reshape(flat, {batch, arch_.image_channels, arch_.image_size, arch_.image_size});
}

ParamList DecoderNet::params() const { return collect("dec.", p_); }

}  // namespace gppvae
