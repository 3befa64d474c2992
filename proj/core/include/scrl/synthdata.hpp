#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "scrl/image_io.hpp"
#include "scrl/rng.hpp"
#include "scrl/types.hpp"

namespace scrl {

// ---------------------------------------------------------------------------
// Dataset model
// ---------------------------------------------------------------------------

// Part labels written into shape masks. 0 is background; limbs are the labels a
// thermal parser tends to lose.
enum PartLabel : std::uint8_t {
  kBackground = 0,
  kHead = 1,
  kTorso = 2,
  kLeftArm = 3,
  kRightArm = 4,
  kLeftLeg = 5,
  kRightLeg = 6,
};
inline constexpr int kNumPartLabels = 6;
inline constexpr bool is_limb(std::uint8_t label) { return label >= kLeftArm && label <= kRightLeg; }

// One pedestrian image with its shape mask. image is [3, H, W] float in [0, 1]
// (channel-first, the tensor layout used everywhere downstream); shape_mask is
// [H, W] uint8 with values in 0..L.
struct ModalitySample {
  torch::Tensor image;
  torch::Tensor shape_mask;
  int identity = 0;
  int camera = 0;
  Modality modality = Modality::Visible;
  std::optional<int> tracklet;
};

struct SampleRecord {
  std::string image_path;  // relative to the manifest directory
  std::string mask_path;
  int identity = 0;
  int camera = 0;
  Modality modality = Modality::Visible;
  std::optional<int> tracklet;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory the relative paths resolve against
  int num_identities = 0;      // K
  int num_labels = kNumPartLabels;  // L
  std::string split = "train";
  std::vector<SampleRecord> records;

  std::filesystem::path image_path(std::size_t i) const { return root / records.at(i).image_path; }
  std::filesystem::path mask_path(std::size_t i) const { return root / records.at(i).mask_path; }

  // Structural checks (label ranges, contiguous identities). With
  // check_images / check_masks, also that referenced files exist.
  void validate(bool check_images, bool check_masks) const;

  void save(const std::filesystem::path& file) const;
  static DatasetManifest parse(const std::filesystem::path& file);
};

struct LoadOptions {
  // Inference never touches masks, so evaluation opens datasets without them.
  bool require_masks = true;
};

// Lazy sample accessor over a manifest.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& manifest_file, LoadOptions opts = {});
  explicit Dataset(DatasetManifest manifest) : manifest_(std::move(manifest)) {}

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.records.size(); }

  ModalitySample sample(std::size_t i) const;
  // Image only; never reads the mask file.
  torch::Tensor image(std::size_t i) const;
  torch::Tensor mask(std::size_t i) const;

 private:
  DatasetManifest manifest_;
};

torch::Tensor image_to_tensor(const Image8& image);   // HWC uint8 -> [3,H,W] float
Image8 tensor_to_image(const torch::Tensor& image);   // [3,H,W] float -> HWC uint8
torch::Tensor mask_to_tensor(const Image8& mask);     // -> [H,W] uint8
Image8 tensor_to_mask(const torch::Tensor& mask);

// Bilinear image / nearest mask resize to (height, width).
ModalitySample resize_sample(const ModalitySample& s, int height, int width);

enum class ShapeEncoding { MultiPart, Silhouette };

// Shape-stream input: the label map scaled to [0,1] (label / L, or 0/1 for the
// silhouette encoding) and replicated to 3 channels.
torch::Tensor encode_shape(const torch::Tensor& mask, int num_labels,
                           ShapeEncoding encoding = ShapeEncoding::MultiPart);

// ---------------------------------------------------------------------------
// Synthetic paired-modality generator
// ---------------------------------------------------------------------------

struct SynthConfig {
  int num_identities = 16;
  int images_per_identity_per_modality = 16;
  int test_images_per_identity_per_modality = 16;
  int frames_per_tracklet = 0;  // 0: image dataset; >0: consecutive frames form tracklets
  int height = 64;
  int width = 32;
  double corruption_rate = 0.5;
  double pixel_noise = 0.03;
  double clutter = 1.0;           // background clutter density multiplier
  double geometry_margin = 0.35;  // min pairwise distance of normalized geometry vectors
  std::uint64_t seed = 1;

  void validate() const;
};

inline constexpr int kGeometryDims = 11;

// Identity-specific body geometry, each coordinate normalized to [0, 1].
struct BodyGeometry {
  std::array<double, kGeometryDims> u{};
};

// Identity-specific appearance. Colors are VIS-only; the stripe pattern on the
// torso shows up in both modalities.
struct IdentityAppearance {
  std::array<double, 3> torso_color{};
  std::array<double, 3> leg_color{};
  std::array<double, 3> skin_color{};
  int stripe_count = 0;
  bool stripes_vertical = false;
};

struct IdentityProfile {
  BodyGeometry geometry;
  IdentityAppearance appearance;
};

// Per-capture pose, shared by the VIS and IR views of one capture.
struct Pose {
  double dx = 0.0;  // fraction of image height
  double dy = 0.0;
  double scale = 1.0;
  std::array<double, kGeometryDims> jitter{};  // added to the identity geometry
};

struct RenderedView {
  Image8 image;        // RGB
  Image8 true_mask;    // ground-truth part labels
  Image8 observed_mask;  // what the parser would deliver (corrupted limbs for IR)
};

std::vector<IdentityProfile> sample_identities(const SynthConfig& cfg, Rng& rng);
Pose sample_pose(Rng& rng, double amplitude = 1.0);
BodyGeometry posed_geometry(const BodyGeometry& g, const Pose& pose);

// Rasterized part labels for a geometry at the given pose.
Image8 render_mask(const BodyGeometry& geometry, const Pose& pose, int height, int width);

// Relabels `rate` of the limb pixels as background: limbs in random order,
// distal end first, so the loss looks like a missing forearm or shin.
Image8 corrupt_limbs(const Image8& mask, double rate, Rng& rng);

RenderedView render_view(const IdentityProfile& profile, const Pose& pose, Modality modality,
                         const SynthConfig& cfg, Rng& rng);

struct GeneratedDataset {
  DatasetManifest train;
  DatasetManifest test;
  std::vector<IdentityProfile> identities;
};

// Writes images/, masks/, masks_gt/ and {train,test}.manifest under out_dir.
GeneratedDataset generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Batching and augmentation
// ---------------------------------------------------------------------------

struct PkSpec {
  int identities = 8;       // P
  int visible_per_id = 4;   // Kv
  int infrared_per_id = 4;  // Ki
  int batch_size() const { return identities * (visible_per_id + infrared_per_id); }
};

// Identity-balanced sampler. A batch lists all VIS samples then all IR
// samples, identity-major within each block. Identities lacking enough
// images in a modality are sampled with replacement.
class PkSampler {
 public:
  PkSampler(const DatasetManifest& manifest, PkSpec spec);

  std::vector<std::size_t> next(Rng& rng) const;
  const PkSpec& spec() const { return spec_; }
  int num_identities() const { return static_cast<int>(by_identity_.size()); }

 private:
  PkSpec spec_;
  // [identity][modality] -> record indices
  std::vector<std::array<std::vector<std::size_t>, 2>> by_identity_;
};

struct AugmentConfig {
  int pad = 4;  // pad-then-crop margin in pixels (10 at 384x144)
  double flip_probability = 0.5;
  double erase_probability = 0.5;
  double erase_area_min = 0.02;
  double erase_area_max = 0.4;
  double erase_aspect_min = 0.3;
  double gray_probability = 0.5;
  std::array<double, 3> erase_fill{0.4914, 0.4822, 0.4465};
};

enum class AugmentMode { Image, Shape };

struct GeometricDraw {
  int offset_y = 0;  // crop origin relative to the unpadded image, in [-pad, pad]
  int offset_x = 0;
  bool flip = false;
};

GeometricDraw draw_geometric(const AugmentConfig& cfg, Rng& rng);

// Pad-then-crop at the drawn offset, then optional horizontal flip. Works on
// [C,H,W] images and [H,W] masks; padding is zero (background).
torch::Tensor apply_geometric(const torch::Tensor& t, const GeometricDraw& draw, int pad);

// Channel random erasing and channel-adaptive grayscale, in place on a copy.
torch::Tensor apply_photometric(const torch::Tensor& image, const AugmentConfig& cfg, Rng& rng);

// Single-sample augmentation. Image mode touches image only; shape mode only
// the mask (crop + flip).
ModalitySample augment(const ModalitySample& s, AugmentMode mode, const AugmentConfig& cfg,
                       Rng& rng);

// Image and mask augmented together: one geometric draw shared by both, then
// photometric ops on the image only.
ModalitySample augment_joint(const ModalitySample& s, const AugmentConfig& cfg, Rng& rng);

}  // namespace scrl
