#include "gppvae/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_set>

namespace gppvae {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Rng

static inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0, u2 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index: n must be positive");
  // rejection sampling to avoid modulo bias
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

Rng Rng::split(std::uint64_t stream) const {
  std::uint64_t s = state_ ^ (0x9e3779b97f4a7c15ULL * (stream + 0x632be59bd9b4e019ULL));
  splitmix64(s);
  return Rng(s);
}

void Rng::shuffle(std::vector<std::size_t>& v) {
  if (v.empty()) return;
  for (std::size_t i = v.size() - 1; i > 0; --i) {
    std::size_t j = index(i + 1);
    std::swap(v[i], v[j]);
  }
}

// ---------------------------------------------------------------------------
// alloc tracker

namespace alloc_tracker {

static std::atomic<std::size_t> g_live{0};
static std::atomic<std::size_t> g_peak{0};
static std::atomic<std::size_t> g_max_single{0};

void reset_peak() {
  g_peak.store(g_live.load());
  g_max_single.store(0);
}

std::size_t live_elems() { return g_live.load(); }
std::size_t peak_elems() { return g_peak.load(); }
std::size_t max_single_alloc() { return g_max_single.load(); }

void on_alloc(std::size_t elems) {
  std::size_t live = g_live.fetch_add(elems) + elems;
  std::size_t peak = g_peak.load();
  while (live > peak && !g_peak.compare_exchange_weak(peak, live)) {
  }
  std::size_t ms = g_max_single.load();
  while (elems > ms && !g_max_single.compare_exchange_weak(ms, elems)) {
  }
}

void on_free(std::size_t elems) { g_live.fetch_sub(elems); }

}  // namespace alloc_tracker

// ---------------------------------------------------------------------------
// threads

static int g_num_threads = [] {
  if (const char* env = std::getenv("GPPVAE_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}();

void set_num_threads(int n) { g_num_threads = std::max(1, n); }
int num_threads() { return g_num_threads; }

void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& chunk_fn) {
  int nt = g_num_threads;
  if (nt <= 1 || n < 2) {
    chunk_fn(0, n);
    return;
  }
  std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(nt), n);
  std::size_t base = n / workers, rem = n % workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::size_t begin = 0;
  for (std::size_t t = 0; t < workers; ++t) {
    std::size_t len = base + (t < rem ? 1 : 0);
    std::size_t end = begin + len;
    pool.emplace_back([=, &chunk_fn] { chunk_fn(begin, end); });
    begin = end;
  }
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// TensorNode / Tensor basics

TensorNode::~TensorNode() {
  if (tracked_elems) alloc_tracker::on_free(tracked_elems);
}

void TensorNode::ensure_grad() {
  if (grad.size() != data.size()) {
    grad.assign(data.size(), 0.0);
    alloc_tracker::on_alloc(data.size());
    tracked_elems += data.size();
  }
}

static std::shared_ptr<TensorNode> new_node(Shape s) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(s);
  node->data.assign(shape_numel(node->shape), 0.0);
  alloc_tracker::on_alloc(node->data.size());
  node->tracked_elems = node->data.size();
  return node;
}

static thread_local int g_no_grad_depth = 0;

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor make_op(Shape out_shape, std::vector<Tensor> inputs,
               std::function<void(TensorNode&)> backward) {
  auto node = new_node(std::move(out_shape));
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs)
      if (in.node() && (in.node()->requires_grad || in.node()->on_graph_path)) needs = true;
  if (needs) {
    node->on_graph_path = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node_);
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape s) { return Tensor(new_node(std::move(s))); }

Tensor Tensor::full(Shape s, double v) {
  auto t = zeros(std::move(s));
  std::fill(t.node_->data.begin(), t.node_->data.end(), v);
  return t;
}

Tensor Tensor::from(Shape s, std::vector<double> vals) {
  if (shape_numel(s) != vals.size())
    throw std::invalid_argument("Tensor::from: " + shape_str(s) + " needs " +
                                std::to_string(shape_numel(s)) + " values, got " +
                                std::to_string(vals.size()));
  auto t = zeros(std::move(s));
  std::copy(vals.begin(), vals.end(), t.node_->data.begin());
  return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::randn(Shape s, Rng& rng) {
  auto t = zeros(std::move(s));
  for (auto& x : t.node_->data) x = rng.normal();
  return t;
}

Tensor Tensor::uniform(Shape s, double lo, double hi, Rng& rng) {
  auto t = zeros(std::move(s));
  for (auto& x : t.node_->data) x = rng.uniform(lo, hi);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("Tensor: undefined");
  return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->data.size() : 0; }
std::size_t Tensor::ndim() const { return shape().size(); }

std::size_t Tensor::extent(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw std::out_of_range("Tensor::extent: axis out of range");
  return s[axis];
}

double* Tensor::data() {
  if (!node_) throw std::logic_error("Tensor: undefined");
  return node_->data.data();
}

const double* Tensor::data() const {
  if (!node_) throw std::logic_error("Tensor: undefined");
  return node_->data.data();
}

double Tensor::value() const {
  if (size() != 1) throw std::logic_error("Tensor::value: not a scalar, shape " + shape_str(shape()));
  return node_->data[0];
}

static std::size_t flat_index(const Shape& s, std::initializer_list<std::size_t> idx) {
  if (idx.size() != s.size())
    throw std::invalid_argument("Tensor index rank mismatch");
  std::size_t flat = 0, axis = 0;
  for (auto i : idx) {
    if (i >= s[axis]) throw std::out_of_range("Tensor index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return flat;
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  return node_->data[flat_index(shape(), idx)];
}

void Tensor::set(std::initializer_list<std::size_t> idx, double v) {
  node_->data[flat_index(shape(), idx)] = v;
}

Tensor& Tensor::set_requires_grad(bool b) {
  if (!node_) throw std::logic_error("Tensor: undefined");
  node_->requires_grad = b;
  return *this;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

Tensor Tensor::grad() const {
  if (!node_) throw std::logic_error("Tensor: undefined");
  auto g = zeros(node_->shape);
  if (has_grad()) std::copy(node_->grad.begin(), node_->grad.end(), g.node_->data.begin());
  return g;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  if (!node_) return Tensor();
  auto t = zeros(node_->shape);
  std::copy(node_->data.begin(), node_->data.end(), t.node_->data.begin());
  return t;
}

void Tensor::backward() const {
  if (!node_) throw std::logic_error("Tensor::backward: undefined");
  if (size() != 1)
    throw std::logic_error("Tensor::backward: root must be scalar, got " + shape_str(shape()));
  // topological order by iterative DFS; order holds shared ownership so
  // breaking parent links below cannot free nodes still awaiting their turn
  std::vector<std::shared_ptr<TensorNode>> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<std::shared_ptr<TensorNode>, std::size_t>> stack;
  stack.emplace_back(node_, 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, child] = stack.back();
    if (child < n->parents.size()) {
      auto p = n->parents[child];
      ++child;
      if (p && !visited.count(p.get()) && (p->backward_fn || p->requires_grad)) {
        visited.insert(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = it->get();
    if (n->backward_fn) {
      n->backward_fn(*n);
      // single-use graph: release closure and parent links as we go
      n->backward_fn = nullptr;
      n->parents.clear();
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise helpers

static void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

enum class BinKind { Same, ScalarRhs, ScalarLhs };

static BinKind bin_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return BinKind::Same;
  if (b.size() == 1) return BinKind::ScalarRhs;
  if (a.size() == 1) return BinKind::ScalarLhs;
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
}

static void accumulate(TensorNode* n, const double* g, std::size_t len) {
  if (!n || !(n->requires_grad || n->on_graph_path || n->backward_fn)) return;
  n->ensure_grad();
  for (std::size_t i = 0; i < len; ++i) n->grad[i] += g[i];
}

static bool wants_grad(const TensorNode* n) {
  return n && (n->requires_grad || n->on_graph_path);
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  BinKind k = bin_kind(a, b, "add");
  const Tensor& big = (k == BinKind::ScalarLhs) ? b : a;
  auto out = make_op(big.shape(), {a, b}, [k](TensorNode& n) {
    TensorNode* pa = n.parents[0].get();
    TensorNode* pb = n.parents[1].get();
    auto to_scalar = [&](TensorNode* p) {
      if (!wants_grad(p)) return;
      p->ensure_grad();
      double s = 0.0;
      for (double g : n.grad) s += g;
      p->grad[0] += s;
    };
    if (k == BinKind::ScalarLhs) to_scalar(pa);
    else accumulate(pa, n.grad.data(), n.grad.size());
    if (k == BinKind::ScalarRhs) to_scalar(pb);
    else accumulate(pb, n.grad.data(), n.grad.size());
  });
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  std::size_t nn = out.size();
  if (k == BinKind::Same)
    for (std::size_t i = 0; i < nn; ++i) po[i] = pa[i] + pb[i];
  else if (k == BinKind::ScalarRhs)
    for (std::size_t i = 0; i < nn; ++i) po[i] = pa[i] + pb[0];
  else
    for (std::size_t i = 0; i < nn; ++i) po[i] = pa[0] + pb[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  BinKind k = bin_kind(a, b, "sub");
  const Tensor& big = (k == BinKind::ScalarLhs) ? b : a;
  auto out = make_op(big.shape(), {a, b}, [k](TensorNode& n) {
    TensorNode* pa = n.parents[0].get();
    TensorNode* pb = n.parents[1].get();
    if (k == BinKind::ScalarLhs) {
      if (wants_grad(pa)) {
        pa->ensure_grad();
        double s = 0.0;
        for (double g : n.grad) s += g;
        pa->grad[0] += s;
      }
    } else {
      accumulate(pa, n.grad.data(), n.grad.size());
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      if (k == BinKind::ScalarRhs) {
        double s = 0.0;
        for (double g : n.grad) s += g;
        pb->grad[0] -= s;
      } else {
        for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
      }
    }
  });
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  std::size_t nn = out.size();
  if (k == BinKind::Same)
    for (std::size_t i = 0; i < nn; ++i) po[i] = pa[i] - pb[i];
  else if (k == BinKind::ScalarRhs)
    for (std::size_t i = 0; i < nn; ++i) po[i] = pa[i] - pb[0];
  else
    for (std::size_t i = 0; i < nn; ++i) po[i] = pa[0] - pb[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  BinKind k = bin_kind(a, b, "mul");
  const Tensor& big = (k == BinKind::ScalarLhs) ? b : a;
  auto out = make_op(big.shape(), {a, b}, [k](TensorNode& n) {
    TensorNode* pa = n.parents[0].get();
    TensorNode* pb = n.parents[1].get();
    const auto& va = pa->data;
    const auto& vb = pb->data;
    if (wants_grad(pa)) {
      pa->ensure_grad();
      if (k == BinKind::ScalarLhs) {
        double s = 0.0;
        for (std::size_t i = 0; i < n.grad.size(); ++i) s += n.grad[i] * vb[i];
        pa->grad[0] += s;
      } else if (k == BinKind::ScalarRhs) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * vb[0];
      } else {
        for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * vb[i];
      }
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      if (k == BinKind::ScalarRhs) {
        double s = 0.0;
        for (std::size_t i = 0; i < n.grad.size(); ++i) s += n.grad[i] * va[i];
        pb->grad[0] += s;
      } else if (k == BinKind::ScalarLhs) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * va[0];
      } else {
        for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * va[i];
      }
    }
  });
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  std::size_t nn = out.size();
  if (k == BinKind::Same)
    for (std::size_t i = 0; i < nn; ++i) po[i] = pa[i] * pb[i];
  else if (k == BinKind::ScalarRhs)
    for (std::size_t i = 0; i < nn; ++i) po[i] = pa[i] * pb[0];
  else
    for (std::size_t i = 0; i < nn; ++i) po[i] = pa[0] * pb[i];
  return out;
}

template <typename Fwd, typename Bwd>
static Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd dfn) {
  check_defined(a, name);
  auto out = make_op(a.shape(), {a}, [dfn](TensorNode& n) {
    TensorNode* pa = n.parents[0].get();
    if (!wants_grad(pa)) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      pa->grad[i] += n.grad[i] * dfn(pa->data[i], n.data[i]);
  });
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = fwd(pa[i]);
  return out;
}

Tensor neg(const Tensor& a) {
  return unary_op(a, "neg", [](double x) { return -x; },
                  [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(a, "scale", [c](double x) { return c * x; },
                  [c](double, double) { return c; });
}

Tensor add_const(const Tensor& a, double c) {
  return unary_op(a, "add_const", [c](double x) { return x + c; },
                  [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, "exp", [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, "log", [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor sin(const Tensor& a) {
  return unary_op(a, "sin", [](double x) { return std::sin(x); },
                  [](double x, double) { return std::cos(x); });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, "sigmoid",
                  [](double x) {
                    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                    double e = std::exp(x);
                    return e / (1.0 + e);
                  },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_op(a, "softplus",
                  [](double x) {
                    if (x > 30.0) return x;
                    return std::log1p(std::exp(x));
                  },
                  [](double x, double) {
                    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                    double e = std::exp(x);
                    return e / (1.0 + e);
                  });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sqrt_clamped(const Tensor& a, double rel_floor) {
  check_defined(a, "sqrt_clamped");
  double mx = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, a.data()[i]);
  double tau = rel_floor * mx;
  auto out = make_op(a.shape(), {a}, [tau](TensorNode& n) {
    TensorNode* pa = n.parents[0].get();
    if (!wants_grad(pa)) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (pa->data[i] > tau) pa->grad[i] += n.grad[i] * 0.5 / n.data[i];
  });
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    po[i] = pa[i] > tau ? std::sqrt(pa[i]) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// row-vector broadcast

static void check_rowvec(const Tensor& m, const Tensor& v, const char* op) {
  if (m.ndim() != 2 || v.ndim() != 1 || m.extent(1) != v.extent(0))
    throw std::invalid_argument(std::string(op) + ": want (m,n) and (n), got " +
                                shape_str(m.shape()) + " and " + shape_str(v.shape()));
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  check_rowvec(m, v, "add_rowvec");
  std::size_t rows = m.extent(0), cols = m.extent(1);
  auto out = make_op(m.shape(), {m, v}, [rows, cols](TensorNode& n) {
    TensorNode* pm = n.parents[0].get();
    TensorNode* pv = n.parents[1].get();
    accumulate(pm, n.grad.data(), n.grad.size());
    if (wants_grad(pv)) {
      pv->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) pv->grad[c] += n.grad[r * cols + c];
    }
  });
  const double* pm = m.data();
  const double* pv = v.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) po[r * cols + c] = pm[r * cols + c] + pv[c];
  return out;
}

Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
  check_rowvec(m, v, "mul_rowvec");
  std::size_t rows = m.extent(0), cols = m.extent(1);
  auto out = make_op(m.shape(), {m, v}, [rows, cols](TensorNode& n) {
    TensorNode* pm = n.parents[0].get();
    TensorNode* pv = n.parents[1].get();
    if (wants_grad(pm)) {
      pm->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          pm->grad[r * cols + c] += n.grad[r * cols + c] * pv->data[c];
    }
    if (wants_grad(pv)) {
      pv->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          pv->grad[c] += n.grad[r * cols + c] * pm->data[r * cols + c];
    }
  });
  const double* pm = m.data();
  const double* pv = v.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) po[r * cols + c] = pm[r * cols + c] * pv[c];
  return out;
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  auto out = make_op({1}, {a}, [](TensorNode& n) {
    TensorNode* pa = n.parents[0].get();
    if (!wants_grad(pa)) return;
    pa->ensure_grad();
    double g = n.grad[0];
    for (auto& x : pa->grad) x += g;
  });
  double acc = 0.0;
  const double* pa = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += pa[i];
  out.data()[0] = acc;
  return out;
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  std::size_t n_elems = a.size();
  if (n_elems == 0) throw std::invalid_argument("mean: empty tensor");
  auto out = make_op({1}, {a}, [n_elems](TensorNode& n) {
    TensorNode* pa = n.parents[0].get();
    if (!wants_grad(pa)) return;
    pa->ensure_grad();
    double g = n.grad[0] / static_cast<double>(n_elems);
    for (auto& x : pa->grad) x += g;
  });
  double acc = 0.0;
  const double* pa = a.data();
  for (std::size_t i = 0; i < n_elems; ++i) acc += pa[i];
  out.data()[0] = acc / static_cast<double>(n_elems);
  return out;
}

// ---------------------------------------------------------------------------
// matmul / structure

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.ndim() != 2 || b.ndim() != 2)
    throw std::invalid_argument("matmul: need 2-d operands, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner extents disagree: " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  auto out = make_op({m, n}, {a, b}, [m, k, n](TensorNode& node) {
    TensorNode* pa = node.parents[0].get();
    TensorNode* pb = node.parents[1].get();
    const double* G = node.grad.data();
    if (wants_grad(pa)) {
      pa->ensure_grad();
      double* dA = pa->grad.data();
      const double* B = pb->data.data();
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[kk * n + j];
          dA[i * k + kk] += acc;
        }
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      double* dB = pb->grad.data();
      const double* A = pa->data.data();
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          double aik = A[i * k + kk];
          if (aik == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) dB[kk * n + j] += aik * G[i * n + j];
        }
    }
  });
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  auto body = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t kk = 0; kk < k; ++kk) {
        double aik = A[i * k + kk];
        if (aik == 0.0) continue;
        const double* brow = B + kk * n;
        double* orow = O + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
      }
  };
  if (m >= 64 && k * n >= 4096) parallel_for(m, body);
  else body(0, m);
  return out;
}

Tensor transpose(const Tensor& a) {
  check_defined(a, "transpose");
  if (a.ndim() != 2)
    throw std::invalid_argument("transpose: need 2-d, got " + shape_str(a.shape()));
  std::size_t m = a.extent(0), n = a.extent(1);
  auto out = make_op({n, m}, {a}, [m, n](TensorNode& node) {
    TensorNode* pa = node.parents[0].get();
    if (!wants_grad(pa)) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) pa->grad[j * n + i] += node.grad[i * m + j];
  });
  const double* A = a.data();
  double* O = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) O[j * m + i] = A[i * n + j];
  return out;
}

Tensor reshape(const Tensor& a, Shape s) {
  check_defined(a, "reshape");
  if (shape_numel(s) != a.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(s));
  auto out = make_op(std::move(s), {a}, [](TensorNode& node) {
    accumulate(node.parents[0].get(), node.grad.data(), node.grad.size());
  });
  std::copy(a.data(), a.data() + a.size(), out.data());
  return out;
}

Tensor take_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  check_defined(a, "take_rows");
  if (a.ndim() < 1) throw std::invalid_argument("take_rows: need rank >= 1");
  std::size_t rows = a.extent(0);
  std::size_t row_len = a.size() / std::max<std::size_t>(rows, 1);
  for (auto i : idx)
    if (i >= rows)
      throw std::out_of_range("take_rows: index " + std::to_string(i) + " out of " +
                              std::to_string(rows));
  Shape os = a.shape();
  os[0] = idx.size();
  auto out = make_op(std::move(os), {a}, [idx, row_len](TensorNode& node) {
    TensorNode* pa = node.parents[0].get();
    if (!wants_grad(pa)) return;
    pa->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const double* g = node.grad.data() + r * row_len;
      double* dst = pa->grad.data() + idx[r] * row_len;
      for (std::size_t c = 0; c < row_len; ++c) dst[c] += g[c];
    }
  });
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(a.data() + idx[r] * row_len, a.data() + (idx[r] + 1) * row_len,
              out.data() + r * row_len);
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check_defined(a, "concat_cols");
  check_defined(b, "concat_cols");
  if (a.ndim() != 2 || b.ndim() != 2 || a.extent(0) != b.extent(0))
    throw std::invalid_argument("concat_cols: want (m,p),(m,q), got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  std::size_t m = a.extent(0), p = a.extent(1), q = b.extent(1);
  auto out = make_op({m, p + q}, {a, b}, [m, p, q](TensorNode& node) {
    TensorNode* pa = node.parents[0].get();
    TensorNode* pb = node.parents[1].get();
    if (wants_grad(pa)) {
      pa->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < p; ++c) pa->grad[r * p + c] += node.grad[r * (p + q) + c];
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < q; ++c)
          pb->grad[r * q + c] += node.grad[r * (p + q) + p + c];
    }
  });
  for (std::size_t r = 0; r < m; ++r) {
    std::copy(a.data() + r * p, a.data() + (r + 1) * p, out.data() + r * (p + q));
    std::copy(b.data() + r * q, b.data() + (r + 1) * q, out.data() + r * (p + q) + p);
  }
  return out;
}

Tensor concat_chans(const Tensor& a, const Tensor& b) {
  check_defined(a, "concat_chans");
  check_defined(b, "concat_chans");
  if (a.ndim() != 4 || b.ndim() != 4 || a.extent(0) != b.extent(0) ||
      a.extent(2) != b.extent(2) || a.extent(3) != b.extent(3))
    throw std::invalid_argument("concat_chans: want (n,c1,h,w),(n,c2,h,w), got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::size_t n = a.extent(0), c1 = a.extent(1), c2 = b.extent(1);
  std::size_t hw = a.extent(2) * a.extent(3);
  auto out = make_op({n, c1 + c2, a.extent(2), a.extent(3)}, {a, b},
                     [n, c1, c2, hw](TensorNode& node) {
    TensorNode* pa = node.parents[0].get();
    TensorNode* pb = node.parents[1].get();
    std::size_t ostride = (c1 + c2) * hw;
    if (wants_grad(pa)) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c1 * hw; ++j)
          pa->grad[i * c1 * hw + j] += node.grad[i * ostride + j];
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c2 * hw; ++j)
          pb->grad[i * c2 * hw + j] += node.grad[i * ostride + c1 * hw + j];
    }
  });
  std::size_t ostride = (c1 + c2) * hw;
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a.data() + i * c1 * hw, a.data() + (i + 1) * c1 * hw, out.data() + i * ostride);
    std::copy(b.data() + i * c2 * hw, b.data() + (i + 1) * c2 * hw,
              out.data() + i * ostride + c1 * hw);
  }
  return out;
}

Tensor rowwise_kron(const Tensor& a, const Tensor& b) {
  check_defined(a, "rowwise_kron");
  check_defined(b, "rowwise_kron");
  if (a.ndim() != 2 || b.ndim() != 2 || a.extent(0) != b.extent(0))
    throw std::invalid_argument("rowwise_kron: want (n,p),(n,q), got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  std::size_t n = a.extent(0), p = a.extent(1), q = b.extent(1);
  auto out = make_op({n, p * q}, {a, b}, [n, p, q](TensorNode& node) {
    TensorNode* pa = node.parents[0].get();
    TensorNode* pb = node.parents[1].get();
    if (wants_grad(pa)) {
      pa->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < p; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < q; ++j)
            acc += node.grad[r * p * q + i * q + j] * pb->data[r * q + j];
          pa->grad[r * p + i] += acc;
        }
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < q; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < p; ++i)
            acc += node.grad[r * p * q + i * q + j] * pa->data[r * p + i];
          pb->grad[r * q + j] += acc;
        }
    }
  });
  const double* A = a.data();
  const double* B = b.data();
  double* O = out.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) O[r * p * q + i * q + j] = A[r * p + i] * B[r * q + j];
  return out;
}

// ---------------------------------------------------------------------------
// convolution

static void check_conv_args(const Tensor& x, const Tensor& w, const Tensor& b,
                            const char* op, bool transposed) {
  if (x.ndim() != 4) throw std::invalid_argument(std::string(op) + ": input must be (n,c,h,w)");
  if (w.ndim() != 4) throw std::invalid_argument(std::string(op) + ": weight must be 4-d");
  if (b.ndim() != 1) throw std::invalid_argument(std::string(op) + ": bias must be 1-d");
  std::size_t in_ch = transposed ? w.extent(0) : w.extent(1);
  std::size_t out_ch = transposed ? w.extent(1) : w.extent(0);
  if (x.extent(1) != in_ch)
    throw std::invalid_argument(std::string(op) + ": channel mismatch, input " +
                                shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (b.extent(0) != out_ch)
    throw std::invalid_argument(std::string(op) + ": bias length " + shape_str(b.shape()) +
                                " vs out channels " + std::to_string(out_ch));
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
  check_conv_args(x, w, b, "conv2d", false);
  std::size_t N = x.extent(0), IC = x.extent(1), IH = x.extent(2), IW = x.extent(3);
  std::size_t OC = w.extent(0), KH = w.extent(2), KW = w.extent(3);
  if (IH + 2 * pad < KH || IW + 2 * pad < KW)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  std::size_t OH = (IH + 2 * pad - KH) / stride + 1;
  std::size_t OW = (IW + 2 * pad - KW) / stride + 1;

  auto out = make_op({N, OC, OH, OW}, {x, w, b},
                     [=](TensorNode& node) {
    TensorNode* px = node.parents[0].get();
    TensorNode* pw = node.parents[1].get();
    TensorNode* pb = node.parents[2].get();
    const double* G = node.grad.data();
    const double* X = px->data.data();
    const double* W = pw->data.data();
    if (wants_grad(px)) {
      px->ensure_grad();
      double* dX = px->grad.data();
      parallel_for(N, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t n = lo; n < hi; ++n)
          for (std::size_t oc = 0; oc < OC; ++oc)
            for (std::size_t oy = 0; oy < OH; ++oy)
              for (std::size_t ox = 0; ox < OW; ++ox) {
                double g = G[((n * OC + oc) * OH + oy) * OW + ox];
                if (g == 0.0) continue;
                for (std::size_t ic = 0; ic < IC; ++ic)
                  for (std::size_t ky = 0; ky < KH; ++ky) {
                    std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(IH)) continue;
                    for (std::size_t kx = 0; kx < KW; ++kx) {
                      std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(IW)) continue;
                      dX[((n * IC + ic) * IH + iy) * IW + ix] +=
                          g * W[((oc * IC + ic) * KH + ky) * KW + kx];
                    }
                  }
              }
      });
    }
    if (wants_grad(pw) || wants_grad(pb)) {
      if (wants_grad(pw)) pw->ensure_grad();
      if (wants_grad(pb)) pb->ensure_grad();
      // per-worker partials merged in worker order, reductions stay deterministic
      int workers = std::max(1, std::min<int>(num_threads(), static_cast<int>(N)));
      std::vector<std::vector<double>> wparts(workers), bparts(workers);
      std::size_t base = N / workers, rem = N % workers;
      std::vector<std::thread> pool;
      for (int t = 0; t < workers; ++t) {
        std::size_t lo = t * base + std::min<std::size_t>(t, rem);
        std::size_t hi = lo + base + (static_cast<std::size_t>(t) < rem ? 1 : 0);
        wparts[t].assign(wants_grad(pw) ? pw->data.size() : 0, 0.0);
        bparts[t].assign(wants_grad(pb) ? pb->data.size() : 0, 0.0);
        auto work = [&, t, lo, hi] {
          double* dW = wparts[t].empty() ? nullptr : wparts[t].data();
          double* dB = bparts[t].empty() ? nullptr : bparts[t].data();
          for (std::size_t n = lo; n < hi; ++n)
            for (std::size_t oc = 0; oc < OC; ++oc)
              for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                  double g = G[((n * OC + oc) * OH + oy) * OW + ox];
                  if (g == 0.0) continue;
                  if (dB) dB[oc] += g;
                  if (!dW) continue;
                  for (std::size_t ic = 0; ic < IC; ++ic)
                    for (std::size_t ky = 0; ky < KH; ++ky) {
                      std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                          static_cast<std::ptrdiff_t>(pad);
                      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(IH)) continue;
                      for (std::size_t kx = 0; kx < KW; ++kx) {
                        std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                            static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(IW)) continue;
                        dW[((oc * IC + ic) * KH + ky) * KW + kx] +=
                            g * X[((n * IC + ic) * IH + iy) * IW + ix];
                      }
                    }
                }
        };
        if (workers == 1) work();
        else pool.emplace_back(work);
      }
      for (auto& th : pool) th.join();
      for (int t = 0; t < workers; ++t) {
        if (wants_grad(pw))
          for (std::size_t i = 0; i < pw->grad.size(); ++i) pw->grad[i] += wparts[t][i];
        if (wants_grad(pb))
          for (std::size_t i = 0; i < pb->grad.size(); ++i) pb->grad[i] += bparts[t][i];
      }
    }
  });

  const double* X = x.data();
  const double* W = w.data();
  const double* B = b.data();
  double* O = out.data();
  parallel_for(N, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t n = lo; n < hi; ++n)
      for (std::size_t oc = 0; oc < OC; ++oc)
        for (std::size_t oy = 0; oy < OH; ++oy)
          for (std::size_t ox = 0; ox < OW; ++ox) {
            double acc = B[oc];
            for (std::size_t ic = 0; ic < IC; ++ic)
              for (std::size_t ky = 0; ky < KH; ++ky) {
                std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(IH)) continue;
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(IW)) continue;
                  acc += X[((n * IC + ic) * IH + iy) * IW + ix] *
                         W[((oc * IC + ic) * KH + ky) * KW + kx];
                }
              }
            O[((n * OC + oc) * OH + oy) * OW + ox] = acc;
          }
  });
  return out;
}

Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& b,
                        std::size_t stride, std::size_t pad, std::size_t out_pad) {
  check_conv_args(x, w, b, "conv2d_transpose", true);
  std::size_t N = x.extent(0), IC = x.extent(1), IH = x.extent(2), IW = x.extent(3);
  std::size_t OC = w.extent(1), KH = w.extent(2), KW = w.extent(3);
  std::size_t oh_raw = (IH - 1) * stride + KH + out_pad;
  std::size_t ow_raw = (IW - 1) * stride + KW + out_pad;
  if (oh_raw < 2 * pad || ow_raw < 2 * pad)
    throw std::invalid_argument("conv2d_transpose: padding exceeds output");
  std::size_t OH = oh_raw - 2 * pad;
  std::size_t OW = ow_raw - 2 * pad;

  auto out = make_op({N, OC, OH, OW}, {x, w, b},
                     [=](TensorNode& node) {
    TensorNode* px = node.parents[0].get();
    TensorNode* pw = node.parents[1].get();
    TensorNode* pb = node.parents[2].get();
    const double* G = node.grad.data();
    const double* X = px->data.data();
    const double* W = pw->data.data();
    if (wants_grad(px)) {
      px->ensure_grad();
      double* dX = px->grad.data();
      parallel_for(N, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t n = lo; n < hi; ++n)
          for (std::size_t ic = 0; ic < IC; ++ic)
            for (std::size_t iy = 0; iy < IH; ++iy)
              for (std::size_t ix = 0; ix < IW; ++ix) {
                double acc = 0.0;
                for (std::size_t oc = 0; oc < OC; ++oc)
                  for (std::size_t ky = 0; ky < KH; ++ky) {
                    std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(pad);
                    if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(OH)) continue;
                    for (std::size_t kx = 0; kx < KW; ++kx) {
                      std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * stride + kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                      if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(OW)) continue;
                      acc += G[((n * OC + oc) * OH + oy) * OW + ox] *
                             W[((ic * OC + oc) * KH + ky) * KW + kx];
                    }
                  }
                dX[((n * IC + ic) * IH + iy) * IW + ix] += acc;
              }
      });
    }
    if (wants_grad(pw)) {
      pw->ensure_grad();
      double* dW = pw->grad.data();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t ic = 0; ic < IC; ++ic)
          for (std::size_t iy = 0; iy < IH; ++iy)
            for (std::size_t ix = 0; ix < IW; ++ix) {
              double xv = X[((n * IC + ic) * IH + iy) * IW + ix];
              if (xv == 0.0) continue;
              for (std::size_t oc = 0; oc < OC; ++oc)
                for (std::size_t ky = 0; ky < KH; ++ky) {
                  std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(pad);
                  if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(OH)) continue;
                  for (std::size_t kx = 0; kx < KW; ++kx) {
                    std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
                    if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(OW)) continue;
                    dW[((ic * OC + oc) * KH + ky) * KW + kx] +=
                        xv * G[((n * OC + oc) * OH + oy) * OW + ox];
                  }
                }
            }
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t oc = 0; oc < OC; ++oc) {
          double acc = 0.0;
          const double* g = G + (n * OC + oc) * OH * OW;
          for (std::size_t i = 0; i < OH * OW; ++i) acc += g[i];
          pb->grad[oc] += acc;
        }
    }
  });

  const double* X = x.data();
  const double* W = w.data();
  const double* B = b.data();
  double* O = out.data();
  parallel_for(N, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t n = lo; n < hi; ++n) {
      double* obase = O + n * OC * OH * OW;
      for (std::size_t oc = 0; oc < OC; ++oc)
        for (std::size_t i = 0; i < OH * OW; ++i) obase[oc * OH * OW + i] = B[oc];
      for (std::size_t ic = 0; ic < IC; ++ic)
        for (std::size_t iy = 0; iy < IH; ++iy)
          for (std::size_t ix = 0; ix < IW; ++ix) {
            double xv = X[((n * IC + ic) * IH + iy) * IW + ix];
            if (xv == 0.0) continue;
            for (std::size_t oc = 0; oc < OC; ++oc)
              for (std::size_t ky = 0; ky < KH; ++ky) {
                std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
                if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(OH)) continue;
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
                  if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(OW)) continue;
                  obase[(oc * OH + oy) * OW + ox] +=
                      xv * W[((ic * OC + oc) * KH + ky) * KW + kx];
                }
              }
          }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// grad_check

double grad_check(const std::function<Tensor()>& loss_builder,
                  const std::vector<Tensor>& params, double h) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");
  for (const auto& p : params) {
    const double* d = p.data();
    for (std::size_t i = 0; i < p.size(); ++i)
      if (!std::isfinite(d[i])) throw std::invalid_argument("grad_check: non-finite parameter");
  }
  for (auto p : params) p.zero_grad();
  Tensor loss = loss_builder();
  if (!std::isfinite(loss.value()))
    throw std::runtime_error("grad_check: non-finite loss value");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    Tensor g = p.grad();
    analytic.emplace_back(g.data(), g.data() + g.size());
  }

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    double* d = p.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      double orig = d[i];
      d[i] = orig + h;
      double fp = loss_builder().value();
      d[i] = orig - h;
      double fm = loss_builder().value();
      d[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double rel = std::abs(analytic[pi][i] - fd) / (std::abs(fd) + 1e-8);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace gppvae
