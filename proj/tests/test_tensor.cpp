#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "gppvae/tensor.hpp"
#include "gppvae/tensor_io.hpp"

using namespace gppvae;

// naive triple-loop matmul oracle
static Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a.at({i, kk}) * b.at({kk, j});
      out.set({i, j}, acc);
    }
  return out;
}

// independent direct convolution oracle, written against the definition
static Tensor conv2d_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                            int pad) {
  int N = (int)x.extent(0), IC = (int)x.extent(1), IH = (int)x.extent(2), IW = (int)x.extent(3);
  int OC = (int)w.extent(0), KH = (int)w.extent(2), KW = (int)w.extent(3);
  int OH = (IH + 2 * pad - KH) / stride + 1;
  int OW = (IW + 2 * pad - KW) / stride + 1;
  Tensor out = Tensor::zeros({(std::size_t)N, (std::size_t)OC, (std::size_t)OH, (std::size_t)OW});
  for (int n = 0; n < N; ++n)
    for (int oc = 0; oc < OC; ++oc)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = b.at({(std::size_t)oc});
          for (int ic = 0; ic < IC; ++ic)
            for (int ky = 0; ky < KH; ++ky)
              for (int kx = 0; kx < KW; ++kx) {
                int iy = oy * stride + ky - pad;
                int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= IH || ix < 0 || ix >= IW) continue;
                acc += x.at({(std::size_t)n, (std::size_t)ic, (std::size_t)iy, (std::size_t)ix}) *
                       w.at({(std::size_t)oc, (std::size_t)ic, (std::size_t)ky, (std::size_t)kx});
              }
          out.set({(std::size_t)n, (std::size_t)oc, (std::size_t)oy, (std::size_t)ox}, acc);
        }
  return out;
}

static double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

TEST_CASE("matmul identity") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(eye, a);
  CHECK(max_abs_diff(c, a) == 0.0);
}

TEST_CASE("matmul orthogonal rows") {
  Tensor a = Tensor::from({1, 2}, {1, 0});
  Tensor b = Tensor::from({2, 1}, {0, 5});
  Tensor c = matmul(a, b);
  CHECK(c.at({0, 0}) == 0.0);
}

TEST_CASE("matmul random vs triple-loop oracle") {
  Rng rng(11);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({4, 2}, rng);
  CHECK(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-14);
}

TEST_CASE("matmul shape mismatch throws") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul backward formulas") {
  Rng rng(7);
  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = Tensor::randn({4, 2}, rng);
  a.set_requires_grad();
  b.set_requires_grad();
  sum(matmul(a, b)).backward();
  // dA = G B^T with G = ones
  Tensor da = a.grad();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double expect = b.at({k, 0}) + b.at({k, 1});
      CHECK(da.at({i, k}) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("grad_check quadratic") {
  Tensor x = Tensor::scalar(3.0).set_requires_grad();
  auto f = [&] { return mul(x, x); };
  double err = grad_check(f, {x}, 1e-5);
  CHECK(err <= 1e-6);
}

TEST_CASE("grad_check sigmoid layer") {
  Rng rng(42);
  Tensor w = Tensor::randn({5, 3}, rng).set_requires_grad();
  Tensor x = Tensor::randn({2, 5}, rng);
  auto f = [&] { return sum(sigmoid(matmul(x, w))); };
  CHECK(grad_check(f, {w}, 1e-4) <= 1e-4);
}

TEST_CASE("grad_check constant function") {
  Tensor x = Tensor::scalar(1.5).set_requires_grad();
  auto f = [&] { return sum(mul(Tensor::scalar(2.0), Tensor::scalar(4.0))); };
  x.zero_grad();
  Tensor loss = f();
  loss.backward();
  CHECK(x.grad().value() == 0.0);
}

TEST_CASE("grad_check rejects non-finite") {
  Tensor x = Tensor::scalar(std::numeric_limits<double>::quiet_NaN()).set_requires_grad();
  auto f = [&] { return mul(x, x); };
  CHECK_THROWS(grad_check(f, {x}, 1e-4));
}

TEST_CASE("elementwise and reduction ops pass grad_check on several shapes") {
  Rng rng(3);
  std::vector<Shape> shapes = {{4}, {2, 3}, {2, 2, 2}};
  for (const auto& s : shapes) {
    Tensor x = Tensor::uniform(s, 0.2, 2.0, rng).set_requires_grad();
    Tensor y = Tensor::uniform(s, -1.0, 1.0, rng).set_requires_grad();
    auto f = [&] {
      Tensor t = add(mul(x, y), sub(x, y));
      t = add(t, exp(scale(y, 0.3)));
      t = add(t, log(x));
      t = add(t, sin(y));
      t = add(t, softplus(y));
      t = add(t, sigmoid(y));
      return add(sum(t), mean(mul(x, x)));
    };
    CHECK(grad_check(f, {x, y}, 1e-4) <= 1e-4);
  }
}

TEST_CASE("relu grad_check away from kink") {
  Rng rng(5);
  Tensor x = Tensor::from({4}, {0.5, -0.7, 1.2, -2.0}).set_requires_grad();
  auto f = [&] { return sum(relu(x)); };
  CHECK(grad_check(f, {x}, 1e-4) <= 1e-4);
}

TEST_CASE("broadcast scalar and rowvec ops") {
  Rng rng(9);
  Tensor m = Tensor::randn({3, 4}, rng).set_requires_grad();
  Tensor v = Tensor::randn({4}, rng).set_requires_grad();
  Tensor s = Tensor::scalar(0.7).set_requires_grad();
  auto f = [&] { return sum(mul(add_rowvec(mul_rowvec(m, v), v), s)); };
  CHECK(grad_check(f, {m, v, s}, 1e-4) <= 1e-4);
}

TEST_CASE("structure ops pass grad_check") {
  Rng rng(17);
  Tensor a = Tensor::randn({3, 4}, rng).set_requires_grad();
  Tensor b = Tensor::randn({3, 2}, rng).set_requires_grad();
  auto f = [&] {
    Tensor t = concat_cols(a, b);                       // 3x6
    Tensor u = take_rows(t, {2, 0});                    // 2x6
    Tensor k = rowwise_kron(take_rows(a, {0, 1}), take_rows(b, {0, 1}));  // 2x8
    return add(sum(matmul(u, transpose(u))), sum(reshape(k, {16})));
  };
  CHECK(grad_check(f, {a, b}, 1e-4) <= 1e-4);
}

TEST_CASE("take_rows out of range throws") {
  Tensor a = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(take_rows(a, {3}), std::out_of_range);
}

TEST_CASE("conv2d matches oracle and passes grad_check") {
  Rng rng(23);
  Tensor x = Tensor::randn({2, 2, 6, 6}, rng);
  Tensor w = Tensor::randn({3, 2, 3, 3}, rng);
  Tensor b = Tensor::randn({3}, rng);
  Tensor y = conv2d(x, w, b, 2, 1);
  CHECK(y.shape() == Shape{2, 3, 3, 3});
  CHECK(max_abs_diff(y, conv2d_oracle(x, w, b, 2, 1)) < 1e-12);

  x.set_requires_grad();
  w.set_requires_grad();
  b.set_requires_grad();
  auto f = [&] { return sum(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); };
  CHECK(grad_check(f, {x, w, b}, 1e-4) <= 1e-4);
}

TEST_CASE("conv2d_transpose shapes and grad_check") {
  Rng rng(29);
  Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
  Tensor w = Tensor::randn({3, 2, 3, 3}, rng);  // ic, oc, kh, kw
  Tensor b = Tensor::randn({2}, rng);
  Tensor y = conv2d_transpose(x, w, b, 2, 1, 1);
  CHECK(y.shape() == Shape{2, 2, 8, 8});

  x.set_requires_grad();
  w.set_requires_grad();
  b.set_requires_grad();
  auto f = [&] { return sum(mul(conv2d_transpose(x, w, b, 2, 1, 1), Tensor::scalar(0.5))); };
  CHECK(grad_check(f, {x, w, b}, 1e-4) <= 1e-4);
}

TEST_CASE("conv transpose is the adjoint of conv") {
  // <conv(x; w), y> == <x, conv_t(y; w)>: the same weight tensor read under
  // the transposed layout (its leading axis becomes the transpose input channels)
  Rng rng(31);
  Tensor x = Tensor::randn({1, 2, 6, 6}, rng);
  Tensor w = Tensor::randn({3, 2, 3, 3}, rng);
  Tensor zero_b3 = Tensor::zeros({3});
  Tensor zero_b2 = Tensor::zeros({2});
  Tensor y = Tensor::randn({1, 3, 3, 3}, rng);

  double lhs = sum(mul(conv2d(x, w, zero_b3, 2, 1), y)).value();
  // conv maps 6x6 -> 3x3; the adjoint maps 3x3 back to 6x6 = (3-1)*2-2+3+1
  double rhs = sum(mul(x, conv2d_transpose(y, w, zero_b2, 2, 1, 1))).value();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("forward results deterministic across repeated evaluation") {
  Rng rng(37);
  Tensor a = Tensor::randn({16, 16}, rng);
  Tensor b = Tensor::randn({16, 16}, rng);
  Tensor c1 = matmul(a, b);
  Tensor c2 = matmul(a, b);
  CHECK(max_abs_diff(c1, c2) == 0.0);
  CHECK(sum(exp(scale(a, 0.1))).value() == sum(exp(scale(a, 0.1))).value());
}

TEST_CASE("gradient accumulates across backward calls until zeroed") {
  Tensor x = Tensor::scalar(2.0).set_requires_grad();
  mul(x, x).backward();
  mul(x, x).backward();
  CHECK(x.grad().value() == doctest::Approx(8.0));
  x.zero_grad();
  mul(x, x).backward();
  CHECK(x.grad().value() == doctest::Approx(4.0));
}

TEST_CASE("rng reproducibility and stream splitting") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng(123).split(1), d = Rng(123).split(2);
  CHECK(c.next_u64() != d.next_u64());
}

TEST_CASE("rng normal moments") {
  Rng rng(99);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("gpt container round trip both dtypes and row reads") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "gppvae_io_test";
  fs::create_directories(dir);
  Rng rng(55);
  Tensor t = Tensor::randn({5, 3, 2}, rng);

  std::string p64 = (dir / "t64.gpt").string();
  write_gpt(p64, t, DType::f64);
  Tensor r = read_gpt(p64);
  CHECK(r.shape() == t.shape());
  CHECK(max_abs_diff(r, t) == 0.0);

  std::string p32 = (dir / "t32.gpt").string();
  write_gpt(p32, t, DType::f32);
  Tensor r32 = read_gpt(p32);
  CHECK(max_abs_diff(r32, t) < 1e-6);

  GptReader reader(p64);
  Tensor rows = reader.read_rows(1, 2);
  CHECK(rows.shape() == Shape{2, 3, 2});
  for (std::size_t i = 0; i < rows.size(); ++i)
    CHECK(rows.data()[i] == t.data()[i + 6]);

  CHECK_THROWS(reader.read_rows(4, 2));
  fs::remove_all(dir);
}

TEST_CASE("alloc tracker sees tensor lifetimes") {
  alloc_tracker::reset_peak();
  std::size_t before = alloc_tracker::live_elems();
  {
    Tensor t = Tensor::zeros({100, 100});
    CHECK(alloc_tracker::live_elems() >= before + 10000);
    CHECK(alloc_tracker::max_single_alloc() >= 10000);
  }
  CHECK(alloc_tracker::live_elems() == before);
}

TEST_CASE("thread count does not change conv results") {
  Rng rng(61);
  Tensor x = Tensor::randn({4, 1, 8, 8}, rng);
  Tensor w = Tensor::randn({2, 1, 3, 3}, rng);
  Tensor b = Tensor::randn({2}, rng);
  int saved = num_threads();
  set_num_threads(1);
  Tensor y1 = conv2d(x, w, b);
  set_num_threads(2);
  Tensor y2 = conv2d(x, w, b);
  set_num_threads(saved);
  CHECK(max_abs_diff(y1, y2) == 0.0);
}
