#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "hemaseg/config.hpp"
#include "hemaseg/data.hpp"
#include "hemaseg/io.hpp"

namespace hemaseg {

struct SegItem {
  std::uint64_t id = 0;
  MultiChannelImage image;
  SparseLabelMask labels;
};

struct ImageItem {
  std::uint64_t id = 0;
  MultiChannelImage image;
};

/// Random-access view over items. Items are produced on demand, so large
/// synthetic datasets cost no memory.
template <typename Item>
struct Dataset {
  std::vector<std::uint64_t> ids;
  std::function<Item(std::uint64_t)> fetch;

  [[nodiscard]] std::size_t size() const { return ids.size(); }
  [[nodiscard]] bool empty() const { return ids.empty(); }
  Item operator[](std::size_t i) const { return fetch(ids.at(i)); }

  /// Sub-dataset over positions `idx` of this one.
  [[nodiscard]] Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d{{}, fetch};
    d.ids.reserve(idx.size());
    for (auto i : idx) d.ids.push_back(ids.at(i));
    return d;
  }

  static Dataset from_items(std::vector<Item> items) {
    auto shared = std::make_shared<std::vector<Item>>(std::move(items));
    Dataset d;
    for (const auto& it : *shared) d.ids.push_back(it.id);
    auto index = std::make_shared<std::map<std::uint64_t, std::size_t>>();
    for (std::size_t i = 0; i < shared->size(); ++i) index->emplace((*shared)[i].id, i);
    d.fetch = [shared, index](std::uint64_t id) { return (*shared)[index->at(id)]; };
    return d;
  }

  [[nodiscard]] std::vector<Item> materialize() const {
    std::vector<Item> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back((*this)[i]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Synthetic sources. Each item derives its streams from (seed, item id) only.

/// Labeled synthetic scene `id` at side `size`, labels sparsified to `label_fraction`.
inline SegItem synthetic_seg_item(std::uint64_t seed, std::uint64_t id, std::size_t size, double label_fraction) {
  const SceneSpec spec = SceneSpec::for_size(size);
  auto [image, dense] = generate_scene(spec, CounterRng(seed, stream_id("data.scene")).fork(id));
  SegItem item{id, std::move(image), {}};
  item.labels = sparsify_labels(dense, label_fraction, CounterRng(seed, stream_id("data.sparsify")).fork(id));
  return item;
}

inline Dataset<SegItem> synthetic_segmentation(std::uint64_t seed, std::size_t count, std::size_t size = 64,
                                               double label_fraction = 0.023) {
  Dataset<SegItem> d;
  for (std::size_t i = 0; i < count; ++i) d.ids.push_back(i);
  d.fetch = [=](std::uint64_t id) { return synthetic_seg_item(seed, id, size, label_fraction); };
  return d;
}

/// Pre-training tiles: source scene `id / tiles_per_source` at side
/// `source_size`, cut into a row-major grid of `tile`-sized tiles. The most
/// recently used `capacity` sources are kept in memory.
class TileSource {
 public:
  TileSource(std::uint64_t seed, std::size_t source_size, std::size_t tile, std::size_t capacity = 64)
      : seed_(seed), source_size_(source_size), tile_(tile), capacity_(std::max<std::size_t>(1, capacity)) {
    if (tile == 0 || source_size % tile != 0) throw std::invalid_argument("TileSource: source size not divisible by tile");
  }

  [[nodiscard]] std::size_t tiles_per_source() const { return (source_size_ / tile_) * (source_size_ / tile_); }

  ImageItem operator()(std::uint64_t id) {
    const std::uint64_t source = id / tiles_per_source();
    std::lock_guard lock(mutex_);
    auto it = cache_.find(source);
    if (it == cache_.end()) {
      if (cache_.size() >= capacity_) {
        cache_.erase(lru_.back());
        lru_.pop_back();
      }
      auto [image, dense] = generate_scene(SceneSpec::for_size(source_size_),
                                           CounterRng(seed_, stream_id("data.source")).fork(source));
      lru_.push_front(source);
      it = cache_.emplace(source, Entry{tile_collate(image, tile_), lru_.begin()}).first;
    } else {
      lru_.splice(lru_.begin(), lru_, it->second.pos);
    }
    return {id, it->second.tiles[id % tiles_per_source()]};
  }

 private:
  struct Entry {
    std::vector<MultiChannelImage> tiles;
    std::list<std::uint64_t>::iterator pos;
  };
  std::uint64_t seed_;
  std::size_t source_size_, tile_, capacity_;
  std::mutex mutex_;
  std::list<std::uint64_t> lru_;
  std::map<std::uint64_t, Entry> cache_;
};

/// Tiles of the given source scenes, in source order then row-major tile order.
inline Dataset<ImageItem> synthetic_pretrain(std::uint64_t seed, const std::vector<std::size_t>& sources,
                                             std::size_t source_size = 256, std::size_t tile = 64) {
  auto src = std::make_shared<TileSource>(seed, source_size, tile);
  Dataset<ImageItem> d;
  const std::size_t per = src->tiles_per_source();
  for (auto s : sources) {
    for (std::size_t t = 0; t < per; ++t) d.ids.push_back(s * per + t);
  }
  d.fetch = [src](std::uint64_t id) { return (*src)(id); };
  return d;
}

// ---------------------------------------------------------------------------
// Manifest-backed datasets

inline Dataset<SegItem> manifest_segmentation(const std::filesystem::path& manifest_path, const Manifest& m,
                                              const std::vector<std::size_t>& rows) {
  const auto dir = manifest_path.parent_path();
  auto entries = std::make_shared<std::map<std::uint64_t, ManifestEntry>>();
  Dataset<SegItem> d;
  for (auto r : rows) {
    const auto& e = m.entries.at(r);
    if (e.label.empty()) throw FormatError("manifest: item " + std::to_string(e.id) + " has no label file");
    entries->emplace(e.id, e);
    d.ids.push_back(e.id);
  }
  d.fetch = [dir, entries](std::uint64_t id) {
    const auto& e = entries->at(id);
    return SegItem{id, load_image(dir / e.image), load_labels(dir / e.label)};
  };
  return d;
}

inline Dataset<ImageItem> manifest_images(const std::filesystem::path& manifest_path, const Manifest& m,
                                          const std::vector<std::size_t>& rows) {
  const auto dir = manifest_path.parent_path();
  auto entries = std::make_shared<std::map<std::uint64_t, ManifestEntry>>();
  Dataset<ImageItem> d;
  for (auto r : rows) {
    const auto& e = m.entries.at(r);
    entries->emplace(e.id, e);
    d.ids.push_back(e.id);
  }
  d.fetch = [dir, entries](std::uint64_t id) { return ImageItem{id, load_image(dir / entries->at(id).image)}; };
  return d;
}

inline std::vector<std::size_t> manifest_rows(const Manifest& m, Split split) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    if (m.entries[i].split == split) rows.push_back(i);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Synthetic dataset on disk

/// Writes `count` labeled synthetic items with split and fold tags plus a
/// manifest. Returns the manifest path.
inline std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, const RunConfig& cfg,
                                                     std::size_t count) {
  std::filesystem::create_directories(dir);
  const auto splits = split_indices(count, cfg.data.train_frac, cfg.data.val_frac, cfg.data.test_frac,
                                    CounterRng(cfg.seed, stream_id("data.split")));
  const auto folds = kfold_indices(count, cfg.segment.folds, CounterRng(cfg.seed, stream_id("data.kfold")));
  Manifest m{cfg.seed, {}};
  for (std::size_t i = 0; i < count; ++i) {
    SegItem it = synthetic_seg_item(cfg.seed, i, cfg.data.tile_size, cfg.data.label_fraction);
    const std::string stem = std::to_string(i);
    save_image(dir / "images" / (stem + ".hsim"), it.image);
    save_labels(dir / "labels" / (stem + ".hslb"), it.labels);
    m.entries.push_back({i, "images/" + stem + ".hsim", "labels/" + stem + ".hslb", splits[i], int(folds[i])});
  }
  const auto path = dir / "manifest.tsv";
  save_manifest(path, m);
  return path;
}

// ---------------------------------------------------------------------------
// Batching

/// Stacks images into [B, C, H, W].
template <typename T>
Tensor<T> stack_images(const std::vector<const MultiChannelImage*>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Shape s = images[0]->pixels.shape();
  Tensor<T> out(Shape{images.size(), s[0], s[1], s[2]});
  const std::size_t n = numel(s);
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b]->pixels.shape() != s) throw_shape_mismatch("stack_images", s, images[b]->pixels.shape());
    const float* src = images[b]->pixels.ptr();
    T* dst = out.ptr() + b * n;
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(src[i]);
  }
  return out;
}

/// Consecutive batches over `order`; the last one may be short.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("make_batches: batch must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch) {
    out.emplace_back(order.begin() + std::ptrdiff_t(i), order.begin() + std::ptrdiff_t(std::min(order.size(), i + batch)));
  }
  return out;
}

}  // namespace hemaseg
