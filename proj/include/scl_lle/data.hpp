#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "scl_lle/image.hpp"
#include "scl_lle/rng.hpp"
#include "scl_lle/segmenter.hpp"

namespace scl_lle {

struct TrainRecord {
  std::filesystem::path input;  // low-light image
  std::filesystem::path label;  // semantic ground truth (same stem)
  std::optional<double> gamma;  // fixed darkening override, else sampled
};

// Unpaired contrastive pools.
struct SampleBank {
  std::vector<std::filesystem::path> positives;
  std::vector<std::filesystem::path> neg_over;
  std::vector<std::filesystem::path> neg_under;
  std::uint64_t rng_seed = 0;
};

struct ScanOptions {
  bool need_positives = true;  // contrastive loss enabled
  bool use_over = true;
  bool use_under = true;
  int classes = 19;
  bool use_cache = true;
};

namespace detail {

inline bool image_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && image_ext(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string file_fnv_hex(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot read " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 15];
  while (f) {
    f.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace detail

// Scans root/{inputs,labels,positives,negatives/over,negatives/under}.
// Deterministic lexicographic ordering; a manifest.json cache of file
// sizes/checksums skips the decode validation on repeat scans.
inline std::pair<std::vector<TrainRecord>, SampleBank> scan_dataset(
    const std::filesystem::path& root, const ScanOptions& opts = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("scan_dataset: no such directory: " + root.string());

  auto inputs = detail::list_images(root / "inputs");
  if (inputs.empty()) throw ConfigError("scan_dataset: no images under " + (root / "inputs").string());

  std::vector<TrainRecord> records;
  records.reserve(inputs.size());
  for (const auto& in : inputs) {
    fs::path label = root / "labels" / (in.stem().string() + ".png");
    if (!fs::exists(label))
      throw IoError("scan_dataset: missing label for " + in.filename().string() + " (want " +
                    label.string() + ")");
    records.push_back({in, label, std::nullopt});
  }

  SampleBank bank;
  bank.positives = detail::list_images(root / "positives");
  bank.neg_over = detail::list_images(root / "negatives" / "over");
  bank.neg_under = detail::list_images(root / "negatives" / "under");
  // ablation switches empty the disabled pools at the bank level
  if (!opts.use_over) bank.neg_over.clear();
  if (!opts.use_under) bank.neg_under.clear();
  if (opts.need_positives && bank.positives.empty())
    throw ConfigError("scan_dataset: contrastive loss enabled but " +
                      (root / "positives").string() + " is empty");
  if (opts.need_positives && (opts.use_over || opts.use_under) && bank.neg_over.empty() &&
      bank.neg_under.empty())
    throw ConfigError("scan_dataset: negatives enabled but the enabled pools under " +
                      (root / "negatives").string() + " are empty");

  // checksum index of everything we will touch
  std::map<std::string, nlohmann::json> files;
  auto note = [&](const fs::path& p) {
    std::string rel = fs::relative(p, root).generic_string();
    files[rel] = {{"size", fs::file_size(p)}, {"fnv", detail::file_fnv_hex(p)}};
  };
  for (const auto& r : records) {
    note(r.input);
    note(r.label);
  }
  for (const auto& p : bank.positives) note(p);
  for (const auto& p : bank.neg_over) note(p);
  for (const auto& p : bank.neg_under) note(p);

  const fs::path cache_path = root / "manifest.json";
  bool validated = false;
  if (opts.use_cache && fs::exists(cache_path)) {
    try {
      std::ifstream f(cache_path);
      nlohmann::json cache = nlohmann::json::parse(f);
      if (cache.value("version", 0) == 1 && cache.at("files") == nlohmann::json(files))
        validated = true;
    } catch (...) {
      validated = false;  // unreadable cache: revalidate
    }
  }

  if (!validated) {
    for (const auto& r : records) {
      ImageTensor img = load_image(r.input);
      LabelMap lab = load_label(r.label, opts.classes);
      if (img.height != lab.height || img.width != lab.width)
        throw FormatError("scan_dataset: size mismatch between " + r.input.filename().string() +
                          " (" + std::to_string(img.height) + "x" + std::to_string(img.width) +
                          ") and " + r.label.filename().string() + " (" +
                          std::to_string(lab.height) + "x" + std::to_string(lab.width) + ")");
    }
    for (const auto& pool : {&bank.positives, &bank.neg_over, &bank.neg_under})
      for (const auto& p : *pool) (void)load_image(p);
    if (opts.use_cache) {
      nlohmann::json cache = {{"version", 1}, {"files", files}};
      std::ofstream f(cache_path);
      if (f) f << cache.dump(1);
    }
  }
  return {std::move(records), std::move(bank)};
}

struct ContrastiveDraw {
  std::filesystem::path positive;
  std::optional<std::filesystem::path> negative;
};

// One uniform positive; the negative comes from a fair coin over the two
// exposure-polarity pools (falling back to the non-empty one), then uniform
// within the pool.
inline ContrastiveDraw sample_contrastive_pair(const SampleBank& bank, Rng& rng,
                                               bool want_negative = true) {
  if (bank.positives.empty()) throw ConfigError("sample_contrastive_pair: empty positive pool");
  ContrastiveDraw d;
  d.positive = bank.positives[rng.index(bank.positives.size())];
  if (!want_negative) return d;
  const bool have_over = !bank.neg_over.empty();
  const bool have_under = !bank.neg_under.empty();
  if (!have_over && !have_under)
    throw ConfigError("sample_contrastive_pair: both negative pools are empty");
  const std::vector<std::filesystem::path>* pool;
  if (have_over && have_under)
    pool = rng.uniform() < 0.5 ? &bank.neg_over : &bank.neg_under;
  else
    pool = have_over ? &bank.neg_over : &bank.neg_under;
  d.negative = (*pool)[rng.index(pool->size())];
  return d;
}

struct BatchOptions {
  int batch_size = 2;
  int train_size = 384;
  bool sample_contrastive = true;  // false once the contrastive term is fully disabled
  bool use_negatives = true;
  bool augment = true;
  double augment_fraction = 0.5;
  double gamma_min = 1.5;
  double gamma_max = 5.0;
  bool crop = false;  // random-crop instead of resize when inputs are large enough
  std::uint64_t seed = 0;
  int classes = 19;
};

struct BatchItem {
  ImageTensor input;
  LabelMap labels;
  ImageTensor positive;
  std::optional<ImageTensor> negative;
  std::filesystem::path input_path;
  std::filesystem::path positive_path;
  std::filesystem::path negative_path;
  double applied_gamma = 1.0;
};

struct TrainBatch {
  std::vector<BatchItem> items;
  long step = 0;
  int epoch = 0;
};

inline long steps_per_epoch(std::size_t n_records, int batch_size) {
  return long((n_records + batch_size - 1) / std::size_t(batch_size));
}

// Deterministic function of (records, bank, step, options): the epoch
// permutation, augmentation gammas and contrastive draws all come from
// counter streams keyed by step/epoch indices.
inline TrainBatch make_batch(const std::vector<TrainRecord>& records, const SampleBank& bank,
                             long step, const BatchOptions& opts) {
  if (opts.batch_size < 1) throw ConfigError("make_batch: batch_size must be >= 1");
  if (records.empty()) throw ConfigError("make_batch: no training records");
  const long spe = steps_per_epoch(records.size(), opts.batch_size);
  const int epoch = int(step / spe);
  const long pos = step % spe;

  std::vector<std::size_t> perm(records.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng shuffle_rng = Rng(opts.seed, "data.epoch").fork(std::uint64_t(epoch));
  for (std::size_t i = perm.size(); i-- > 1;)
    std::swap(perm[i], perm[shuffle_rng.index(i + 1)]);

  TrainBatch batch;
  batch.step = step;
  batch.epoch = epoch;
  const std::size_t lo = std::size_t(pos) * opts.batch_size;
  const std::size_t hi = std::min(records.size(), lo + opts.batch_size);
  for (std::size_t bi = lo; bi < hi; ++bi) {
    const TrainRecord& rec = records[perm[bi]];
    BatchItem item;
    item.input_path = rec.input;
    ImageTensor img = load_image(rec.input);
    LabelMap lab = load_label(rec.label, opts.classes);
    if (img.height != lab.height || img.width != lab.width)
      throw FormatError("make_batch: size mismatch between " + rec.input.string() + " and " +
                        rec.label.string());

    const int ts = opts.train_size;
    if (opts.crop && img.height >= ts && img.width >= ts) {
      Rng crop_rng = Rng(opts.seed, "data.crop").fork(std::uint64_t(step)).fork(bi - lo);
      int y0 = int(crop_rng.index(std::uint64_t(img.height - ts + 1)));
      int x0 = int(crop_rng.index(std::uint64_t(img.width - ts + 1)));
      ImageTensor ci(ts, ts);
      LabelMap cl(ts, ts, lab.classes);
      for (int y = 0; y < ts; ++y) {
        for (int x = 0; x < ts; ++x) {
          for (int c = 0; c < 3; ++c) ci.at(c, y, x) = img.at(c, y0 + y, x0 + x);
          cl.at(y, x) = lab.at(y0 + y, x0 + x);
        }
      }
      item.input = std::move(ci);
      item.labels = std::move(cl);
    } else {
      item.input = resize(img, ts, ts);
      item.labels = resize_labels(lab, ts, ts);
    }

    if (rec.gamma) {
      item.applied_gamma = *rec.gamma;
    } else if (opts.augment) {
      Rng aug_rng = Rng(opts.seed, "data.aug").fork(std::uint64_t(epoch)).fork(perm[bi]);
      if (aug_rng.uniform() < opts.augment_fraction)
        item.applied_gamma = aug_rng.uniform(opts.gamma_min, opts.gamma_max);
    }
    if (item.applied_gamma != 1.0) item.input = gamma_darken(item.input, item.applied_gamma);

    if (opts.sample_contrastive) {
      Rng sample_rng = Rng(opts.seed, "data.sample").fork(std::uint64_t(step)).fork(bi - lo);
      ContrastiveDraw draw = sample_contrastive_pair(bank, sample_rng, opts.use_negatives);
      item.positive_path = draw.positive;
      item.positive = resize(load_image(draw.positive), ts, ts);
      if (draw.negative) {
        item.negative_path = *draw.negative;
        item.negative = resize(load_image(*draw.negative), ts, ts);
      }
    }
    batch.items.push_back(std::move(item));
  }
  return batch;
}

}  // namespace scl_lle
