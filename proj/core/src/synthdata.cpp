#include "scrl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "scrl/error.hpp"

namespace scrl {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestMagic = "scrl-manifest";
constexpr int kManifestVersion = 1;

double lerp(double lo, double hi, double t) { return lo + (hi - lo) * t; }
double deg(double d) { return d * M_PI / 180.0; }

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

int parse_int(const std::string& text, const std::string& what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(text, &pos);
    if (pos != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw Error("synthdata", "manifest: bad integer for " + what + ": '" + text + "'");
  }
}

// Physical body layout in units of image height, x relative to the centre line.
struct Layout {
  double head_cy, head_rx, head_ry;
  double torso_top, torso_bottom, torso_hw;
  std::array<double, 2> arm_x0;
  double arm_y0, arm_len, arm_r, arm_angle;
  std::array<double, 2> leg_x0;
  double leg_y0, leg_len, leg_r, leg_angle;
};

Layout layout_of(const BodyGeometry& g) {
  const auto& u = g.u;
  Layout l{};
  l.head_ry = lerp(0.050, 0.080, u[0]);
  l.head_rx = l.head_ry * lerp(0.70, 1.05, u[1]);
  l.head_cy = 0.04 + l.head_ry;
  l.torso_hw = lerp(0.065, 0.115, u[2]);
  l.torso_top = l.head_cy + l.head_ry + 0.005;
  l.torso_bottom = l.torso_top + lerp(0.24, 0.33, u[3]);
  l.arm_len = lerp(0.20, 0.32, u[4]);
  l.arm_r = lerp(0.018, 0.036, u[5]);
  l.arm_angle = deg(lerp(2.0, 22.0, u[6]));
  l.arm_x0 = {-(l.torso_hw - 0.5 * l.arm_r), l.torso_hw - 0.5 * l.arm_r};
  l.arm_y0 = l.torso_top + l.arm_r + 0.01;
  l.leg_len = lerp(0.28, 0.40, u[7]);
  l.leg_r = lerp(0.024, 0.045, u[8]);
  l.leg_angle = deg(lerp(0.0, 12.0, u[9]));
  const double hip = lerp(0.025, 0.06, u[10]);
  l.leg_x0 = {-hip, hip};
  l.leg_y0 = l.torso_bottom - 0.03;
  return l;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

std::uint8_t label_at(const Layout& l, double x, double y) {
  {
    const double nx = x / l.head_rx, ny = (y - l.head_cy) / l.head_ry;
    if (nx * nx + ny * ny <= 1.0) return kHead;
  }
  for (int side = 0; side < 2; ++side) {
    const double sgn = side == 0 ? -1.0 : 1.0;
    const double ax = l.arm_x0[side], ay = l.arm_y0;
    const double bx = ax + sgn * l.arm_len * std::sin(l.arm_angle);
    const double by = ay + l.arm_len * std::cos(l.arm_angle);
    if (segment_distance(x, y, ax, ay, bx, by) <= l.arm_r) {
      return side == 0 ? kLeftArm : kRightArm;
    }
  }
  {
    const double cy = 0.5 * (l.torso_top + l.torso_bottom);
    const double hh = 0.5 * (l.torso_bottom - l.torso_top);
    const double nx = x / l.torso_hw, ny = (y - cy) / hh;
    if (nx * nx * nx * nx + ny * ny * ny * ny <= 1.0) return kTorso;
  }
  for (int side = 0; side < 2; ++side) {
    const double sgn = side == 0 ? -1.0 : 1.0;
    const double ax = l.leg_x0[side], ay = l.leg_y0;
    const double bx = ax + sgn * l.leg_len * std::sin(l.leg_angle);
    const double by = ay + l.leg_len * std::cos(l.leg_angle);
    if (segment_distance(x, y, ax, ay, bx, by) <= l.leg_r) {
      return side == 0 ? kLeftLeg : kRightLeg;
    }
  }
  return kBackground;
}

// Maps a pixel centre to body-frame coordinates (units of image height).
std::pair<double, double> body_coords(int py, int px, const Pose& pose, int height, int width) {
  const double h = height;
  const double xs = ((px + 0.5) - 0.5 * width) / h;
  const double ys = (py + 0.5) / h;
  const double xb = (xs - pose.dx) / pose.scale;
  const double yb = (ys - pose.dy - 0.5) / pose.scale + 0.5;
  return {xb, yb};
}

std::array<double, 3> random_color(Rng& rng, double lo = 0.08, double hi = 0.95) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Torso stripe modulation in [0, 1]: 1 inside a stripe band.
bool in_stripe(const IdentityAppearance& a, const Layout& l, double x, double y) {
  if (a.stripe_count == 0) return false;
  double t;
  if (a.stripes_vertical) {
    t = (x + l.torso_hw) / (2.0 * l.torso_hw);
  } else {
    t = (y - l.torso_top) / (l.torso_bottom - l.torso_top);
  }
  const double phase = t * (2.0 * a.stripe_count);
  return (static_cast<long>(std::floor(phase)) % 2) == 1;
}

void paint_clutter(std::vector<double>& canvas, int channels, int height, int width, int count,
                   bool ellipses, bool gray, Rng& rng, double lo, double hi) {
  for (int n = 0; n < count; ++n) {
    const double cy = rng.uniform(0, height), cx = rng.uniform(0, width);
    const double ry = rng.uniform(0.04, 0.22) * height, rx = rng.uniform(0.08, 0.45) * width;
    std::array<double, 3> col{};
    if (gray) {
      const double v = rng.uniform(lo, hi);
      col = {v, v, v};
    } else {
      col = random_color(rng, lo, hi);
    }
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double ny = (y + 0.5 - cy) / ry, nx = (x + 0.5 - cx) / rx;
        const bool inside = ellipses ? nx * nx + ny * ny <= 1.0 : std::abs(nx) <= 1 && std::abs(ny) <= 1;
        if (!inside) continue;
        for (int c = 0; c < channels; ++c) {
          canvas[(static_cast<std::size_t>(y) * width + x) * channels + c] = col[c];
        }
      }
    }
  }
}

std::string view_name(int identity, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d_%03d.png", identity, index);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

void DatasetManifest::validate(bool check_images, bool check_masks) const {
  if (num_identities <= 0) throw Error("synthdata", "manifest declares no identities");
  if (num_labels <= 0 || num_labels > 255) {
    throw Error("synthdata", "manifest label count out of range: " + std::to_string(num_labels));
  }
  std::set<int> seen;
  for (const auto& r : records) {
    if (r.identity < 0 || r.identity >= num_identities) {
      throw Error("synthdata", "identity " + std::to_string(r.identity) + " outside [0, " +
                                   std::to_string(num_identities) + ") for " + r.image_path);
    }
    seen.insert(r.identity);
  }
  if (!records.empty() && static_cast<int>(seen.size()) != num_identities) {
    throw Error("synthdata", "identities in split '" + split + "' are not contiguous 0.." +
                                 std::to_string(num_identities - 1));
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (check_images && !fs::exists(image_path(i))) {
      throw Error("synthdata", "missing file " + image_path(i).string());
    }
    if (check_masks && !fs::exists(mask_path(i))) {
      throw Error("synthdata", "missing file " + mask_path(i).string());
    }
  }
}

void DatasetManifest::save(const fs::path& file) const {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error("synthdata", "cannot write manifest " + file.string());
  os << kManifestMagic << ' ' << kManifestVersion << '\n';
  os << "identities " << num_identities << '\n';
  os << "labels " << num_labels << '\n';
  os << "split " << split << '\n';
  os << "records " << records.size() << '\n';
  for (const auto& r : records) {
    os << r.image_path << '\t' << r.mask_path << '\t' << r.identity << '\t' << r.camera << '\t'
       << to_string(r.modality) << '\t';
    if (r.tracklet) {
      os << *r.tracklet;
    } else {
      os << '-';
    }
    os << '\n';
  }
  if (!os) throw Error("synthdata", "short write on manifest " + file.string());
}

DatasetManifest DatasetManifest::parse(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw Error("synthdata", "missing file " + file.string());
  DatasetManifest m;
  m.root = file.parent_path();

  auto header = [&](const std::string& key) {
    std::string line;
    if (!std::getline(is, line)) throw Error("synthdata", "manifest truncated before '" + key + "'");
    std::istringstream ls(line);
    std::string k, v;
    ls >> k >> v;
    if (k != key) {
      throw Error("synthdata", "manifest: expected '" + key + "', found '" + k + "' in " + file.string());
    }
    return v;
  };
  if (parse_int(header(kManifestMagic), "version") != kManifestVersion) {
    throw Error("synthdata", "unsupported manifest version in " + file.string());
  }
  m.num_identities = parse_int(header("identities"), "identities");
  m.num_labels = parse_int(header("labels"), "labels");
  m.split = header("split");
  const int count = parse_int(header("records"), "records");

  std::string line;
  int lineno = 5;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 6) {
      throw Error("synthdata", file.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    }
    SampleRecord r;
    r.image_path = f[0];
    r.mask_path = f[1];
    r.identity = parse_int(f[2], "identity");
    r.camera = parse_int(f[3], "camera");
    auto mod = parse_modality(f[4]);
    if (!mod) throw Error("synthdata", "manifest: bad modality '" + f[4] + "'");
    r.modality = *mod;
    if (f[5] != "-") r.tracklet = parse_int(f[5], "tracklet");
    m.records.push_back(std::move(r));
  }
  if (static_cast<int>(m.records.size()) != count) {
    throw Error("synthdata", "manifest declares " + std::to_string(count) + " records, found " +
                                 std::to_string(m.records.size()));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Dataset accessor and tensor conversion
// ---------------------------------------------------------------------------

Dataset Dataset::open(const fs::path& manifest_file, LoadOptions opts) {
  auto m = DatasetManifest::parse(manifest_file);
  m.validate(/*check_images=*/true, /*check_masks=*/opts.require_masks);
  return Dataset(std::move(m));
}

torch::Tensor Dataset::image(std::size_t i) const {
  return image_to_tensor(read_png(manifest_.image_path(i), 3));
}

torch::Tensor Dataset::mask(std::size_t i) const {
  const auto t = mask_to_tensor(read_png(manifest_.mask_path(i), 1));
  const int max_label = t.max().item<int>();
  if (max_label > manifest_.num_labels) {
    throw Error("synthdata", "mask label " + std::to_string(max_label) + " exceeds L=" +
                                 std::to_string(manifest_.num_labels) + " in " +
                                 manifest_.mask_path(i).string());
  }
  return t;
}

ModalitySample Dataset::sample(std::size_t i) const {
  const auto& r = manifest_.records.at(i);
  ModalitySample s;
  s.image = image(i);
  s.shape_mask = mask(i);
  if (s.image.size(1) != s.shape_mask.size(0) || s.image.size(2) != s.shape_mask.size(1)) {
    throw Error("synthdata", "mask/image size mismatch for " + manifest_.image_path(i).string());
  }
  s.identity = r.identity;
  s.camera = r.camera;
  s.modality = r.modality;
  s.tracklet = r.tracklet;
  return s;
}

torch::Tensor image_to_tensor(const Image8& image) {
  if (image.channels != 3) throw Error("synthdata", "expected an RGB image");
  auto t = torch::from_blob(const_cast<std::uint8_t*>(image.pixels.data()),
                            {image.height, image.width, 3}, torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

Image8 tensor_to_image(const torch::Tensor& image) {
  auto t = image.detach().to(torch::kFloat32).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8)
               .permute({1, 2, 0})
               .contiguous();
  Image8 out(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), 3);
  std::memcpy(out.pixels.data(), t.data_ptr<std::uint8_t>(), out.pixels.size());
  return out;
}

torch::Tensor mask_to_tensor(const Image8& mask) {
  if (mask.channels != 1) throw Error("synthdata", "expected a single-channel mask");
  return torch::from_blob(const_cast<std::uint8_t*>(mask.pixels.data()), {mask.height, mask.width},
                          torch::kUInt8)
      .clone();
}

Image8 tensor_to_mask(const torch::Tensor& mask) {
  auto t = mask.to(torch::kUInt8).contiguous();
  Image8 out(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), 1);
  std::memcpy(out.pixels.data(), t.data_ptr<std::uint8_t>(), out.pixels.size());
  return out;
}

ModalitySample resize_sample(const ModalitySample& s, int height, int width) {
  if (s.image.size(1) == height && s.image.size(2) == width) return s;
  namespace F = torch::nn::functional;
  ModalitySample out = s;
  out.image = F::interpolate(s.image.unsqueeze(0),
                             F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBilinear)
                                 .align_corners(false))
                  .squeeze(0)
                  .clamp(0.0, 1.0);
  if (s.shape_mask.defined()) {
    out.shape_mask = F::interpolate(s.shape_mask.to(torch::kFloat32).unsqueeze(0).unsqueeze(0),
                                    F::InterpolateFuncOptions()
                                        .size(std::vector<int64_t>{height, width})
                                        .mode(torch::kNearest))
                         .squeeze(0)
                         .squeeze(0)
                         .to(torch::kUInt8);
  }
  return out;
}

torch::Tensor encode_shape(const torch::Tensor& mask, int num_labels, ShapeEncoding encoding) {
  torch::Tensor plane;
  if (encoding == ShapeEncoding::Silhouette) {
    plane = mask.gt(0).to(torch::kFloat32);
  } else {
    plane = mask.to(torch::kFloat32).div(static_cast<double>(num_labels));
  }
  return plane.unsqueeze(0).expand({3, plane.size(0), plane.size(1)}).contiguous();
}

// ---------------------------------------------------------------------------
// Renderer
// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
  if (num_identities <= 0) throw Error("synthdata", "degenerate config: num_identities must be > 0");
  if (images_per_identity_per_modality <= 0) {
    throw Error("synthdata", "degenerate config: images_per_identity_per_modality must be > 0");
  }
  if (test_images_per_identity_per_modality < 0) {
    throw Error("synthdata", "test_images_per_identity_per_modality must be >= 0");
  }
  if (frames_per_tracklet < 0) throw Error("synthdata", "frames_per_tracklet must be >= 0");
  if (height < 32 || width < 32) throw Error("synthdata", "image size must be at least 32x32");
  if (!(corruption_rate >= 0.0 && corruption_rate <= 1.0)) {
    throw Error("synthdata", "corruption_rate must lie in [0, 1]");
  }
  if (pixel_noise < 0.0 || clutter < 0.0) throw Error("synthdata", "noise levels must be >= 0");
  if (geometry_margin < 0.0) throw Error("synthdata", "geometry_margin must be >= 0");
}

std::vector<IdentityProfile> sample_identities(const SynthConfig& cfg, Rng& rng) {
  std::vector<IdentityProfile> out;
  out.reserve(cfg.num_identities);
  const double margin2 = cfg.geometry_margin * cfg.geometry_margin;
  int attempts = 0;
  while (static_cast<int>(out.size()) < cfg.num_identities) {
    if (++attempts > 200000) {
      throw Error("synthdata", "cannot place " + std::to_string(cfg.num_identities) +
                                   " identities with geometry margin " +
                                   std::to_string(cfg.geometry_margin));
    }
    BodyGeometry g;
    for (auto& v : g.u) v = rng.uniform();
    bool ok = true;
    for (const auto& other : out) {
      double d2 = 0;
      for (int k = 0; k < kGeometryDims; ++k) {
        const double d = g.u[k] - other.geometry.u[k];
        d2 += d * d;
      }
      if (d2 < margin2) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    IdentityProfile p;
    p.geometry = g;
    p.appearance.torso_color = random_color(rng);
    p.appearance.leg_color = random_color(rng);
    const double skin = rng.uniform(0.35, 0.9);
    p.appearance.skin_color = {skin, skin * rng.uniform(0.7, 0.85), skin * rng.uniform(0.55, 0.7)};
    static constexpr int kStripeChoices[] = {0, 2, 3, 4, 5};
    p.appearance.stripe_count = kStripeChoices[rng.below(5)];
    p.appearance.stripes_vertical = rng.bernoulli(0.5);
    out.push_back(p);
  }
  return out;
}

Pose sample_pose(Rng& rng, double amplitude) {
  Pose p;
  p.dx = amplitude * rng.uniform(-0.03, 0.03);
  p.dy = amplitude * rng.uniform(-0.02, 0.02);
  p.scale = 1.0 + amplitude * rng.uniform(-0.06, 0.03);
  for (auto& j : p.jitter) j = amplitude * rng.uniform(-0.02, 0.02);
  return p;
}

BodyGeometry posed_geometry(const BodyGeometry& g, const Pose& pose) {
  BodyGeometry out = g;
  for (int k = 0; k < kGeometryDims; ++k) out.u[k] = std::clamp(g.u[k] + pose.jitter[k], 0.0, 1.0);
  return out;
}

Image8 render_mask(const BodyGeometry& geometry, const Pose& pose, int height, int width) {
  const Layout l = layout_of(posed_geometry(geometry, pose));
  Image8 mask(height, width, 1);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const auto [xb, yb] = body_coords(y, x, pose, height, width);
      mask.at(y, x) = label_at(l, xb, yb);
    }
  }
  return mask;
}

Image8 corrupt_limbs(const Image8& mask, double rate, Rng& rng) {
  Image8 out = mask;
  std::array<std::vector<std::size_t>, 4> limbs;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const auto v = mask.at(y, x);
      if (is_limb(v)) limbs[v - kLeftArm].push_back(static_cast<std::size_t>(y) * mask.width + x);
    }
  }
  std::array<int, 4> order{0, 1, 2, 3};
  for (int i = 3; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);

  std::vector<std::size_t> queue;
  for (int li : order) {
    auto pix = limbs[li];
    // Raster order is row-major, so reversing puts the distal (lowest) rows first.
    std::reverse(pix.begin(), pix.end());
    queue.insert(queue.end(), pix.begin(), pix.end());
  }
  const auto n_erase = static_cast<std::size_t>(std::llround(rate * static_cast<double>(queue.size())));
  for (std::size_t i = 0; i < n_erase && i < queue.size(); ++i) out.pixels[queue[i]] = kBackground;
  return out;
}

RenderedView render_view(const IdentityProfile& profile, const Pose& pose, Modality modality,
                         const SynthConfig& cfg, Rng& rng) {
  const int h = cfg.height, w = cfg.width;
  RenderedView view;
  view.true_mask = render_mask(profile.geometry, pose, h, w);
  const Layout l = layout_of(posed_geometry(profile.geometry, pose));
  const auto& app = profile.appearance;
  const int clutter_count = static_cast<int>(std::lround(cfg.clutter * rng.uniform(3.0, 7.0)));

  std::vector<double> canvas(static_cast<std::size_t>(h) * w * 3);
  if (modality == Modality::Visible) {
    const auto top = random_color(rng, 0.2, 0.9), bottom = random_color(rng, 0.2, 0.9);
    for (int y = 0; y < h; ++y) {
      const double t = static_cast<double>(y) / (h - 1);
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) canvas[(y * w + x) * 3 + c] = lerp(top[c], bottom[c], t);
      }
    }
    paint_clutter(canvas, 3, h, w, clutter_count, false, false, rng, 0.05, 0.95);
    const double light = rng.uniform(0.8, 1.1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto label = view.true_mask.at(y, x);
        if (label == kBackground) continue;
        const auto [xb, yb] = body_coords(y, x, pose, h, w);
        std::array<double, 3> col{};
        switch (label) {
          case kHead:
          case kLeftArm:
          case kRightArm:
            col = app.skin_color;
            break;
          case kTorso:
            col = app.torso_color;
            if (in_stripe(app, l, xb, yb)) {
              for (auto& c : col) c *= 0.45;
            }
            break;
          default:
            col = app.leg_color;
            break;
        }
        for (int c = 0; c < 3; ++c) canvas[(y * w + x) * 3 + c] = col[c] * light;
      }
    }
  } else {
    const double bg = rng.uniform(0.08, 0.3);
    std::fill(canvas.begin(), canvas.end(), bg);
    paint_clutter(canvas, 3, h, w, clutter_count, true, true, rng, 0.15, 0.55);
    const double body = rng.uniform(0.65, 0.92);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto label = view.true_mask.at(y, x);
        if (label == kBackground) continue;
        const auto [xb, yb] = body_coords(y, x, pose, h, w);
        double v = body;
        if (label == kTorso && in_stripe(app, l, xb, yb)) v *= 0.72;
        // Exposed skin sits close to the background temperature.
        if (is_limb(label)) v = 0.6 * body + 0.4 * bg;
        for (int c = 0; c < 3; ++c) canvas[(y * w + x) * 3 + c] = v;
      }
    }
  }

  view.image = Image8(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (modality == Modality::Visible) {
        for (int c = 0; c < 3; ++c) {
          const double v = canvas[(y * w + x) * 3 + c] + cfg.pixel_noise * rng.normal();
          view.image.at(y, x, c) = to_byte(v);
        }
      } else {
        const auto v = to_byte(canvas[(y * w + x) * 3] + cfg.pixel_noise * rng.normal());
        for (int c = 0; c < 3; ++c) view.image.at(y, x, c) = v;
      }
    }
  }

  view.observed_mask = modality == Modality::Infrared
                           ? corrupt_limbs(view.true_mask, cfg.corruption_rate, rng)
                           : view.true_mask;
  return view;
}

GeneratedDataset generate_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw Error("synthdata", "cannot create directory " + out_dir.string());
  }
  {
    const auto probe = out_dir / ".write_probe";
    std::ofstream os(probe);
    if (!os) throw Error("synthdata", "directory not writable: " + out_dir.string());
    os.close();
    fs::remove(probe, ec);
  }

  GeneratedDataset out;
  Rng id_rng = Rng::derive(cfg.seed, 1);
  out.identities = sample_identities(cfg, id_rng);

  const std::array<std::pair<const char*, int>, 2> splits{
      {{"train", cfg.images_per_identity_per_modality},
       {"test", cfg.test_images_per_identity_per_modality}}};

  for (int si = 0; si < 2; ++si) {
    const auto [split, per_id] = splits[si];
    DatasetManifest m;
    m.root = out_dir;
    m.num_identities = cfg.num_identities;
    m.num_labels = kNumPartLabels;
    m.split = split;
    for (const char* dir : {"images", "masks", "masks_gt"}) {
      for (const char* mod : {"vis", "ir"}) fs::create_directories(out_dir / dir / split / mod);
    }

    for (int id = 0; id < cfg.num_identities; ++id) {
      Rng pose_rng = Rng::derive(cfg.seed, 1000 + static_cast<std::uint64_t>(si) * 100000 + id);
      Pose tracklet_base;
      for (int k = 0; k < per_id; ++k) {
        Pose pose;
        if (cfg.frames_per_tracklet > 0) {
          if (k % cfg.frames_per_tracklet == 0) tracklet_base = sample_pose(pose_rng);
          Pose small = sample_pose(pose_rng, 0.25);
          pose = tracklet_base;
          pose.dx += small.dx;
          pose.dy += small.dy;
          for (int d = 0; d < kGeometryDims; ++d) pose.jitter[d] += 0.25 * small.jitter[d];
        } else {
          pose = sample_pose(pose_rng);
        }
        for (Modality mod : {Modality::Visible, Modality::Infrared}) {
          const int mi = static_cast<int>(mod);
          const std::uint64_t tag = 0x100000000ULL + (static_cast<std::uint64_t>(si) << 40) +
                                    (static_cast<std::uint64_t>(id) << 20) +
                                    (static_cast<std::uint64_t>(k) << 1) + mi;
          Rng view_rng = Rng::derive(cfg.seed, tag);
          const RenderedView v = render_view(out.identities[id], pose, mod, cfg, view_rng);
          const std::string mod_dir = mod == Modality::Visible ? "vis" : "ir";
          const std::string rel = std::string(split) + "/" + mod_dir + "/" + view_name(id, k);
          write_png(out_dir / "images" / rel, v.image);
          write_png(out_dir / "masks" / rel, v.observed_mask);
          write_png(out_dir / "masks_gt" / rel, v.true_mask);

          SampleRecord r;
          r.image_path = "images/" + rel;
          r.mask_path = "masks/" + rel;
          r.identity = id;
          r.camera = (mod == Modality::Visible ? 0 : 2) + (k % 2);
          r.modality = mod;
          if (cfg.frames_per_tracklet > 0) {
            const int per_seq = (per_id + cfg.frames_per_tracklet - 1) / cfg.frames_per_tracklet;
            r.tracklet = ((si * cfg.num_identities + id) * 2 + mi) * per_seq + k / cfg.frames_per_tracklet;
          }
          m.records.push_back(std::move(r));
        }
      }
    }
    m.save(out_dir / (std::string(split) + ".manifest"));
    (si == 0 ? out.train : out.test) = std::move(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PK sampling
// ---------------------------------------------------------------------------

PkSampler::PkSampler(const DatasetManifest& manifest, PkSpec spec) : spec_(spec) {
  if (spec.identities <= 0 || spec.visible_per_id < 0 || spec.infrared_per_id < 0 ||
      spec.visible_per_id + spec.infrared_per_id == 0) {
    throw Error("synthdata", "invalid PK batch specification");
  }
  by_identity_.resize(manifest.num_identities);
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    by_identity_.at(r.identity)[static_cast<int>(r.modality)].push_back(i);
  }
  if (spec.identities > manifest.num_identities) {
    throw Error("synthdata", "P=" + std::to_string(spec.identities) + " exceeds K=" +
                                 std::to_string(manifest.num_identities));
  }
  for (std::size_t id = 0; id < by_identity_.size(); ++id) {
    if ((spec.visible_per_id > 0 && by_identity_[id][0].empty()) ||
        (spec.infrared_per_id > 0 && by_identity_[id][1].empty())) {
      throw Error("synthdata", "identity " + std::to_string(id) + " lacks a required modality");
    }
  }
}

std::vector<std::size_t> PkSampler::next(Rng& rng) const {
  const int k_total = static_cast<int>(by_identity_.size());
  std::vector<int> ids(k_total);
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < spec_.identities; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(k_total - i)));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(spec_.identities);

  std::vector<std::size_t> vis, ir;
  auto draw = [&](const std::vector<std::size_t>& pool, int k, std::vector<std::size_t>& out) {
    if (static_cast<int>(pool.size()) >= k) {
      std::vector<std::size_t> p = pool;
      for (int i = 0; i < k; ++i) {
        const auto j = i + rng.below(p.size() - i);
        std::swap(p[i], p[j]);
        out.push_back(p[i]);
      }
    } else {
      for (int i = 0; i < k; ++i) out.push_back(pool[rng.below(pool.size())]);
    }
  };
  for (int id : ids) {
    draw(by_identity_[id][0], spec_.visible_per_id, vis);
    draw(by_identity_[id][1], spec_.infrared_per_id, ir);
  }
  vis.insert(vis.end(), ir.begin(), ir.end());
  return vis;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

GeometricDraw draw_geometric(const AugmentConfig& cfg, Rng& rng) {
  GeometricDraw d;
  d.offset_y = cfg.pad > 0 ? rng.uniform_int(-cfg.pad, cfg.pad) : 0;
  d.offset_x = cfg.pad > 0 ? rng.uniform_int(-cfg.pad, cfg.pad) : 0;
  d.flip = rng.bernoulli(cfg.flip_probability);
  return d;
}

torch::Tensor apply_geometric(const torch::Tensor& t, const GeometricDraw& draw, int pad) {
  const bool is_mask = t.dim() == 2;
  torch::Tensor x = is_mask ? t.unsqueeze(0) : t;
  const int64_t h = x.size(1), w = x.size(2);
  if (pad > 0) x = torch::constant_pad_nd(x, {pad, pad, pad, pad}, 0);
  x = x.slice(1, pad + draw.offset_y, pad + draw.offset_y + h)
          .slice(2, pad + draw.offset_x, pad + draw.offset_x + w);
  if (draw.flip) x = x.flip({2});
  x = x.contiguous();
  return is_mask ? x.squeeze(0) : x;
}

torch::Tensor apply_photometric(const torch::Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  auto out = image.clone();
  const int64_t h = out.size(1), w = out.size(2);
  if (rng.bernoulli(cfg.erase_probability)) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double area = rng.uniform(cfg.erase_area_min, cfg.erase_area_max) * static_cast<double>(h * w);
      const double log_lo = std::log(cfg.erase_aspect_min), log_hi = -log_lo;
      const double aspect = std::exp(rng.uniform(log_lo, log_hi));
      const auto eh = static_cast<int64_t>(std::lround(std::sqrt(area * aspect)));
      const auto ew = static_cast<int64_t>(std::lround(std::sqrt(area / aspect)));
      if (eh < h && ew < w && eh > 0 && ew > 0) {
        const auto y0 = static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(h - eh + 1)));
        const auto x0 = static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(w - ew + 1)));
        for (int c = 0; c < 3; ++c) {
          out[c].slice(0, y0, y0 + eh).slice(1, x0, x0 + ew).fill_(cfg.erase_fill[c]);
        }
        break;
      }
    }
  }
  if (rng.bernoulli(cfg.gray_probability)) {
    auto lum = out[0] * 0.299 + out[1] * 0.587 + out[2] * 0.114;
    out = lum.unsqueeze(0).expand({3, h, w}).contiguous();
  }
  return out;
}

ModalitySample augment(const ModalitySample& s, AugmentMode mode, const AugmentConfig& cfg, Rng& rng) {
  ModalitySample out = s;
  const GeometricDraw d = draw_geometric(cfg, rng);
  if (mode == AugmentMode::Image) {
    out.image = apply_photometric(apply_geometric(s.image, d, cfg.pad), cfg, rng);
  } else {
    out.shape_mask = apply_geometric(s.shape_mask, d, cfg.pad);
  }
  return out;
}

ModalitySample augment_joint(const ModalitySample& s, const AugmentConfig& cfg, Rng& rng) {
  ModalitySample out = s;
  const GeometricDraw d = draw_geometric(cfg, rng);
  out.image = apply_photometric(apply_geometric(s.image, d, cfg.pad), cfg, rng);
  if (s.shape_mask.defined()) out.shape_mask = apply_geometric(s.shape_mask, d, cfg.pad);
  return out;
}

}  // namespace scrl
