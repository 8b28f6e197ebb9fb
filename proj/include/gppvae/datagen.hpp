#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "gppvae/tensor.hpp"

namespace gppvae {

// Sample metadata plus split membership. Samples are object-major:
// n = p * Q + q.
struct DatasetInfo {
  std::size_t n = 0;
  std::size_t objects = 0;
  std::size_t views = 0;
  std::size_t image_size = 28;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
  std::vector<double> angles;             // per view, radians
  std::vector<std::size_t> object_ids;    // per sample
  std::vector<std::size_t> view_ids;      // per sample
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  std::vector<std::size_t> test_idx;
  std::size_t heldout_view = 0;
  bool has_split = false;
};

struct Dataset {
  DatasetInfo info;
  Tensor images;  // N x 1 x S x S in [0, 1]
};

// P procedurally drawn glyphs (random smooth closed strokes), each rendered
// at Q angles 2*pi*q/Q by bilinear rotation about the image center.
Dataset generate_glyphs(std::size_t objects, std::size_t views, std::size_t size,
                        std::uint64_t seed);

// counterclockwise bilinear rotation with zero padding
Tensor rotate_image(const Tensor& img, double angle);

struct SplitSpec {
  double val_frac = 0.10;
  double dropout = 0.25;
  std::size_t heldout_view = 0;
  std::uint64_t seed = 0;
};

// 10% of samples to validation, 25% of the rest dropped, every retained
// sample of the held-out view to test, remainder to train. Counts are
// apportioned per view so the split totals are exact; the drop is re-sampled
// (up to 100 times) until every test object keeps at least one training view.
void split(DatasetInfo& info, const SplitSpec& spec);

// directory layout: manifest.json + images/object_ids/view_ids/view_features
// in the tensor container format
void save_dataset(const std::string& dir, const Dataset& ds);

class DatasetView {
 public:
  static DatasetView in_memory(Dataset ds);
  // cache = false streams image rows from disk on demand
  static DatasetView open(const std::string& dir, bool cache);

  const DatasetInfo& info() const { return info_; }
  Tensor load_rows(const std::vector<std::size_t>& rows) const;

 private:
  DatasetInfo info_;
  Tensor images_;      // defined when cached
  std::string path_;   // image container path when streaming
};

}  // namespace gppvae
