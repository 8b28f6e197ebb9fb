#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace gppvae {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Deterministic splittable RNG. splitmix64 core with Box-Muller normals;
// std:: distributions are implementation-defined and would break
// reproducibility guarantees, so everything random goes through this.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next_u64();
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);
  double normal();
  std::size_t index(std::size_t n);        // [0, n)
  Rng split(std::uint64_t stream) const;   // independent derived stream
  void shuffle(std::vector<std::size_t>& v);

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Allocation accounting in elements (not bytes). Used by the training
// protocol tests to verify the minibatch memory contract.
namespace alloc_tracker {
void reset_peak();
std::size_t live_elems();
std::size_t peak_elems();
std::size_t max_single_alloc();
void on_alloc(std::size_t elems);
void on_free(std::size_t elems);
}  // namespace alloc_tracker

void set_num_threads(int n);
int num_threads();
// Splits [0, n) into contiguous chunks, one per worker. Chunk boundaries
// depend only on n and the thread count, so results are reproducible.
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& chunk_fn);

struct TensorNode;

// Dense row-major tensor with optional reverse-mode autodiff record.
// Handles share the underlying node; ops build single-use backward graphs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor from(Shape s, std::vector<double> vals);
  static Tensor scalar(double v);
  static Tensor randn(Shape s, Rng& rng);
  static Tensor uniform(Shape s, double lo, double hi, Rng& rng);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t ndim() const;
  std::size_t extent(std::size_t axis) const;
  double* data();
  const double* data() const;
  double value() const;  // scalar tensors only
  double at(std::initializer_list<std::size_t> idx) const;
  void set(std::initializer_list<std::size_t> idx, double v);

  Tensor& set_requires_grad(bool b = true);
  bool requires_grad() const;
  bool has_grad() const;
  Tensor grad() const;  // zeros-shaped copy if never touched
  void zero_grad();

  // Reverse pass from a scalar root. Consumes the graph.
  void backward() const;

  Tensor detach() const;  // value copy, no graph, no grad flag
  Tensor clone() const { return detach(); }

  TensorNode* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;

  friend Tensor make_op(Shape out_shape, std::vector<Tensor> inputs,
                        std::function<void(TensorNode&)> backward);
};

// Builds an op node: zero-initialized output, recording parents and the
// backward closure only when some input is on a gradient path.
Tensor make_op(Shape out_shape, std::vector<Tensor> inputs,
               std::function<void(TensorNode&)> backward);

// While alive, ops never record backward graphs (value-only evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily
  bool requires_grad = false;
  bool on_graph_path = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  std::size_t tracked_elems = 0;

  TensorNode() = default;
  TensorNode(const TensorNode&) = delete;
  ~TensorNode();
  void ensure_grad();
};

// --- elementwise / scalar ---
Tensor add(const Tensor& a, const Tensor& b);  // same shape, or one scalar
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
// sqrt(max(x, 0)) with gradient zeroed at entries below rel_floor * max(x).
// Keeps factor gradients finite when eigenvalues are clamped.
Tensor sqrt_clamped(const Tensor& a, double rel_floor = 1e-12);

// --- broadcast over rows of a matrix ---
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor mul_rowvec(const Tensor& m, const Tensor& v);

// --- reductions (64-bit accumulation, fixed order) ---
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// --- shape / structure ---
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape s);
Tensor take_rows(const Tensor& a, const std::vector<std::size_t>& idx);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_chans(const Tensor& a, const Tensor& b);
// out[n, i*q + j] = a[n, i] * b[n, j]
Tensor rowwise_kron(const Tensor& a, const Tensor& b);

// --- conv (NCHW, weight OCxICxKHxKW; transpose weight ICxOCxKHxKW) ---
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride = 2, std::size_t pad = 1);
Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& b,
                        std::size_t stride = 2, std::size_t pad = 1,
                        std::size_t out_pad = 1);

// Max over params of |analytic - central difference| / (|central difference| + 1e-8).
// The builder must rebuild the graph from the given leaf parameters.
double grad_check(const std::function<Tensor()>& loss_builder,
                  const std::vector<Tensor>& params, double h);

}  // namespace gppvae
