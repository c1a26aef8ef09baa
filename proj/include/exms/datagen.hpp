#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "exms/model.hpp"
#include "exms/rng.hpp"

namespace exms {

// Normalized integer box, top-left / bottom-right corners in [0,1000].
struct BBox {
  int64_t x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Pixel-space box with exclusive bottom-right corner.
struct PixelBox {
  int64_t x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

void validate(const BBox& b);

// round-half-away-from-zero(c * 1000 / dim), clamped to [0,1000]; x by width,
// y by height. Requires 0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height.
BBox normalize_bbox(const PixelBox& px, int64_t width, int64_t height);
// c * dim / 1000 rounded to the nearest pixel.
PixelBox denormalize_bbox(const BBox& b, int64_t width, int64_t height);

enum class ShapeClass : uint8_t { Rectangle, Square, Circle, Triangle };
enum class ColorName : uint8_t { Red, Green, Blue };

const char* shape_name(ShapeClass s);
const char* color_name(ColorName c);
std::optional<ShapeClass> shape_from_name(const std::string& s);
std::optional<ColorName> color_from_name(const std::string& s);

struct ObjectSpec {
  ShapeClass shape = ShapeClass::Circle;
  ColorName color = ColorName::Red;
};

struct SceneObject {
  ShapeClass shape = ShapeClass::Circle;
  ColorName color = ColorName::Red;
  PixelBox pixel_bbox;
  BBox norm_bbox;
};

// (class name, color name) -> count
using CountMap = std::map<std::pair<std::string, std::string>, int64_t>;

struct SceneRecord {
  ImageBatch image;
  std::vector<SceneObject> objects;
  std::string caption;
  CountMap count_targets;
};

struct RenderOpts {
  double iou_cap = 0.3;    // max pairwise bbox IoU between placed objects
  int max_retries = 100;   // placement attempts per object
  int64_t min_size = 10;   // sampled shape extent, pixels
  int64_t max_size = 16;
};

// Primitive rasterizers paint onto the image and return the tight pixel
// bounding box of what they drew (exclusive corners).
PixelBox draw_rectangle(ImageBatch& img, int64_t x, int64_t y, int64_t w, int64_t h, ColorName c);
PixelBox draw_circle(ImageBatch& img, int64_t x, int64_t y, int64_t radius, ColorName c);
PixelBox draw_triangle(ImageBatch& img, int64_t x, int64_t y, int64_t base, int64_t height,
                       ColorName c);

// Deterministic scene raster on a black background. Objects are placed in
// spec order with uniformly sampled sizes/positions; a placement whose bbox
// IoU with any earlier object exceeds iou_cap is retried.
SceneRecord render_scene(const std::vector<ObjectSpec>& spec, int64_t width, int64_t height,
                         uint64_t seed, const RenderOpts& opts = {});

// "<count> <color> <class>(s)" groups joined by " and ", sorted by
// (color, class); an empty record reads "an empty image".
std::string make_caption(const SceneRecord& record);
std::string caption_from_counts(const CountMap& counts);
// Inverse of caption_from_counts; nullopt when the text is not a well-formed
// caption.
std::optional<CountMap> parse_caption(const std::string& caption);

struct DatasetOpts {
  std::vector<std::pair<int64_t, int64_t>> buckets = {{1, 3}, {4, 6}, {7, 10}};
  std::vector<ShapeClass> classes = {ShapeClass::Circle, ShapeClass::Square,
                                     ShapeClass::Triangle};
  int64_t width = 64;
  int64_t height = 64;
  RenderOpts render{0.3, 100, 8, 12};
};

// Stratified counting scenes: every (bucket x class) cell receives floor or
// ceil of n/cells records (remainder spread over the first cells in order);
// the object count inside a bucket is uniform. Requires n >= cells.
std::vector<SceneRecord> sample_counting_dataset(int64_t n, const DatasetOpts& opts,
                                                 uint64_t seed);

void write_ppm(const std::string& path, const ImageBatch& img);
ImageBatch read_ppm(const std::string& path);

// Directory layout: <dir>/data.jsonl plus one PPM per record. Each JSONL row:
// {image, objects:[{class,color,bbox}], caption, counts}; bbox is normalized.
void write_dataset(const std::string& dir, const std::vector<SceneRecord>& records);
std::vector<SceneRecord> load_dataset(const std::string& jsonl_path);

}  // namespace exms
