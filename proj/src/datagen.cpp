#include "gppvae/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "gppvae/tensor_io.hpp"

namespace gppvae {

namespace fs = std::filesystem;
using nlohmann::json;

// one glyph: closed stroke with a Fourier-perturbed radius, drawn with a
// gaussian pen profile; shape coefficients are the per-object latents
static void render_glyph(double* out, std::size_t size, Rng& rng) {
  const int harmonics = 4;
  std::vector<double> ac(harmonics), bc(harmonics);
  for (int k = 0; k < harmonics; ++k) {
    double s = 0.55 / double(k + 2);
    ac[k] = s * rng.normal();
    bc[k] = s * rng.normal();
  }
  double pen = rng.uniform(0.8, 1.3);
  double base_r = 0.30 * double(size);
  double max_r = 0.5 * double(size) - 2.5;  // keep inside the inscribed circle

  const int samples = 256;
  std::vector<double> px(samples), py(samples);
  double c = 0.5 * double(size) - 0.5;
  for (int i = 0; i < samples; ++i) {
    double t = 2.0 * M_PI * double(i) / double(samples);
    double r = 1.0;
    for (int k = 0; k < harmonics; ++k)
      r += ac[k] * std::cos(double(k + 2) * t) + bc[k] * std::sin(double(k + 2) * t);
    r = base_r * std::clamp(r, 0.35, 1.35);
    r = std::min(r, max_r);
    px[i] = c + r * std::cos(t);
    py[i] = c + r * std::sin(t);
  }

  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double d2 = 1e18;
      for (int i = 0; i < samples; ++i) {
        double dx = double(x) - px[i];
        double dy = double(y) - py[i];
        d2 = std::min(d2, dx * dx + dy * dy);
      }
      out[y * size + x] = std::exp(-0.5 * d2 / (pen * pen));
    }
}

Tensor rotate_image(const Tensor& img, double angle) {
  if (img.ndim() != 2 || img.extent(0) != img.extent(1))
    throw std::invalid_argument("rotate_image: want a square 2-d image");
  std::size_t size = img.extent(0);
  Tensor out = Tensor::zeros({size, size});
  double c = 0.5 * double(size) - 0.5;
  double ca = std::cos(angle), sa = std::sin(angle);
  const double* src = img.data();
  double* dst = out.data();
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      // inverse map: rotate the output position back by -angle
      double rx = double(x) - c, ry = double(y) - c;
      double sx = ca * rx + sa * ry + c;
      double sy = -sa * rx + ca * ry + c;
      double v = 0.0;
      int x0 = (int)std::floor(sx), y0 = (int)std::floor(sy);
      double fx = sx - x0, fy = sy - y0;
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
          int xi = x0 + dx, yi = y0 + dy;
          if (xi < 0 || yi < 0 || xi >= (int)size || yi >= (int)size) continue;
          double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
          v += w * src[yi * size + xi];
        }
      dst[y * size + x] = v;
    }
  return out;
}

Dataset generate_glyphs(std::size_t objects, std::size_t views, std::size_t size,
                        std::uint64_t seed) {
  if (objects < 1 || views < 2 || size < 16)
    throw std::invalid_argument("generate_glyphs: need objects >= 1, views >= 2, size >= 16");
  Dataset ds;
  ds.info.n = objects * views;
  ds.info.objects = objects;
  ds.info.views = views;
  ds.info.image_size = size;
  ds.info.seed = seed;
  ds.info.angles.resize(views);
  for (std::size_t q = 0; q < views; ++q)
    ds.info.angles[q] = 2.0 * M_PI * double(q) / double(views);
  ds.info.object_ids.resize(ds.info.n);
  ds.info.view_ids.resize(ds.info.n);
  ds.images = Tensor::zeros({ds.info.n, 1, size, size});

  Rng root(seed);
  // per-object streams make the output independent of worker scheduling
  parallel_for(objects, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = lo; p < hi; ++p) {
      Rng glyph_rng = root.split(p);
      Tensor base = Tensor::zeros({size, size});
      render_glyph(base.data(), size, glyph_rng);
      for (std::size_t q = 0; q < views; ++q) {
        std::size_t n = p * views + q;
        ds.info.object_ids[n] = p;
        ds.info.view_ids[n] = q;
        Tensor rot = q == 0 ? base : rotate_image(base, ds.info.angles[q]);
        std::copy(rot.data(), rot.data() + size * size,
                  ds.images.data() + n * size * size);
      }
    }
  });
  return ds;
}

// largest-remainder apportionment of `total` across `weights` buckets
static std::vector<std::size_t> apportion(std::size_t total,
                                          const std::vector<std::size_t>& bucket_sizes) {
  std::size_t all = 0;
  for (auto b : bucket_sizes) all += b;
  std::vector<std::size_t> out(bucket_sizes.size(), 0);
  if (all == 0) return out;
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < bucket_sizes.size(); ++i) {
    double exact = double(total) * double(bucket_sizes[i]) / double(all);
    out[i] = static_cast<std::size_t>(exact);
    out[i] = std::min(out[i], bucket_sizes[i]);
    assigned += out[i];
    rema.push_back({exact - double(out[i]), i});
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total && k < rema.size(); ++k) {
    std::size_t i = rema[k].second;
    if (out[i] < bucket_sizes[i]) {
      ++out[i];
      ++assigned;
    }
  }
  if (assigned != total) throw std::logic_error("apportion: cannot reach requested total");
  return out;
}

void split(DatasetInfo& info, const SplitSpec& spec) {
  if (spec.val_frac < 0.0 || spec.val_frac >= 1.0 || spec.dropout < 0.0 || spec.dropout >= 1.0)
    throw std::invalid_argument("split: fractions must lie in [0, 1)");
  if (spec.heldout_view >= info.views)
    throw std::invalid_argument("split: held-out view " + std::to_string(spec.heldout_view) +
                                " not present among " + std::to_string(info.views) + " views");

  std::vector<std::vector<std::size_t>> by_view(info.views);
  for (std::size_t n = 0; n < info.n; ++n) by_view[info.view_ids[n]].push_back(n);

  Rng rng(spec.seed);

  // validation first, apportioned per view so the split totals are exact
  std::vector<std::size_t> view_sizes(info.views);
  for (std::size_t q = 0; q < info.views; ++q) view_sizes[q] = by_view[q].size();
  std::size_t val_total = static_cast<std::size_t>(std::llround(spec.val_frac * double(info.n)));
  std::vector<std::size_t> val_per_view = apportion(val_total, view_sizes);

  std::vector<std::size_t> val_idx;
  std::vector<std::vector<std::size_t>> remaining(info.views);
  for (std::size_t q = 0; q < info.views; ++q) {
    auto rows = by_view[q];
    rng.shuffle(rows);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i < val_per_view[q]) val_idx.push_back(rows[i]);
      else remaining[q].push_back(rows[i]);
    }
  }

  std::size_t remaining_total = 0;
  for (auto& r : remaining) remaining_total += r.size();
  std::size_t drop_total =
      static_cast<std::size_t>(std::llround(spec.dropout * double(remaining_total)));
  std::vector<std::size_t> rem_sizes(info.views);
  for (std::size_t q = 0; q < info.views; ++q) rem_sizes[q] = remaining[q].size();
  std::vector<std::size_t> drop_per_view = apportion(drop_total, rem_sizes);

  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t q = 0; q < info.views; ++q) {
      auto rows = remaining[q];
      rng.shuffle(rows);
      for (std::size_t i = drop_per_view[q]; i < rows.size(); ++i) {
        if (q == spec.heldout_view) test_idx.push_back(rows[i]);
        else train_idx.push_back(rows[i]);
      }
    }
    if (test_idx.empty())
      throw std::runtime_error("split: held-out view was dropped entirely");

    // every test object must keep at least one training view
    std::vector<char> in_train(info.objects, 0);
    for (auto n : train_idx) in_train[info.object_ids[n]] = 1;
    bool covered = true;
    for (auto n : test_idx)
      if (!in_train[info.object_ids[n]]) covered = false;
    if (!covered) continue;

    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    info.train_idx = std::move(train_idx);
    info.test_idx = std::move(test_idx);
    info.val_idx = std::move(val_idx);
    info.heldout_view = spec.heldout_view;
    info.has_split = true;
    return;
  }
  throw std::runtime_error("split: could not cover every test object within 100 attempts");
}

static json info_to_json(const DatasetInfo& info) {
  json j;
  j["n"] = info.n;
  j["objects"] = info.objects;
  j["views"] = info.views;
  j["image_size"] = info.image_size;
  j["channels"] = info.channels;
  j["seed"] = info.seed;
  j["angles"] = info.angles;
  j["object_ids"] = info.object_ids;
  j["view_ids"] = info.view_ids;
  j["heldout_view"] = info.heldout_view;
  j["has_split"] = info.has_split;
  j["train_idx"] = info.train_idx;
  j["val_idx"] = info.val_idx;
  j["test_idx"] = info.test_idx;
  return j;
}

static DatasetInfo info_from_json(const json& j) {
  DatasetInfo info;
  info.n = j.at("n");
  info.objects = j.at("objects");
  info.views = j.at("views");
  info.image_size = j.at("image_size");
  info.channels = j.at("channels");
  info.seed = j.at("seed");
  info.angles = j.at("angles").get<std::vector<double>>();
  info.object_ids = j.at("object_ids").get<std::vector<std::size_t>>();
  info.view_ids = j.at("view_ids").get<std::vector<std::size_t>>();
  info.heldout_view = j.at("heldout_view");
  info.has_split = j.at("has_split");
  info.train_idx = j.at("train_idx").get<std::vector<std::size_t>>();
  info.val_idx = j.at("val_idx").get<std::vector<std::size_t>>();
  info.test_idx = j.at("test_idx").get<std::vector<std::size_t>>();
  return info;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
  fs::create_directories(dir);
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("save_dataset: cannot write manifest in " + dir);
  mf << info_to_json(ds.info).dump(2) << "\n";

  write_gpt((fs::path(dir) / "images.gpt").string(), ds.images);
  auto ids_tensor = [](const std::vector<std::size_t>& v) {
    Tensor t = Tensor::zeros({v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t.data()[i] = double(v[i]);
    return t;
  };
  write_gpt((fs::path(dir) / "object_ids.gpt").string(), ids_tensor(ds.info.object_ids));
  write_gpt((fs::path(dir) / "view_ids.gpt").string(), ids_tensor(ds.info.view_ids));
  Tensor feats = Tensor::zeros({ds.info.views, 1});
  for (std::size_t q = 0; q < ds.info.views; ++q) feats.data()[q] = ds.info.angles[q];
  write_gpt((fs::path(dir) / "view_features.gpt").string(), feats);
}

DatasetView DatasetView::in_memory(Dataset ds) {
  DatasetView v;
  v.info_ = std::move(ds.info);
  v.images_ = std::move(ds.images);
  return v;
}

DatasetView DatasetView::open(const std::string& dir, bool cache) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("DatasetView: no manifest.json in " + dir);
  json j;
  mf >> j;
  DatasetView v;
  v.info_ = info_from_json(j);
  v.path_ = (fs::path(dir) / "images.gpt").string();
  if (cache) v.images_ = read_gpt(v.path_);
  return v;
}

Tensor DatasetView::load_rows(const std::vector<std::size_t>& rows) const {
  std::size_t s = info_.image_size;
  if (images_.defined()) {
    return take_rows(images_, rows).detach();
  }
  GptReader reader(path_);
  Tensor out = Tensor::zeros({rows.size(), info_.channels, s, s});
  std::size_t row_elems = info_.channels * s * s;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Tensor row = reader.read_rows(rows[i], 1);
    std::copy(row.data(), row.data() + row_elems, out.data() + i * row_elems);
  }
  return out;
}

}  // namespace gppvae
