#include "exms/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace exms {

namespace {

constexpr double kColorValues[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};

void set_pixel(ImageBatch& img, int64_t x, int64_t y, ColorName c) {
  double* p = img.pixels.data() + (y * img.width + x) * 3;
  const double* cv = kColorValues[static_cast<int>(c)];
  p[0] = cv[0];
  p[1] = cv[1];
  p[2] = cv[2];
}

struct Extent {
  int64_t minx = INT64_MAX, miny = INT64_MAX, maxx = INT64_MIN, maxy = INT64_MIN;
  void cover(int64_t x, int64_t y) {
    minx = std::min(minx, x);
    maxx = std::max(maxx, x);
    miny = std::min(miny, y);
    maxy = std::max(maxy, y);
  }
  PixelBox box() const { return PixelBox{minx, miny, maxx + 1, maxy + 1}; }
};

double iou(const PixelBox& a, const PixelBox& b) {
  int64_t ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  int64_t iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  double inter = static_cast<double>(ix) * static_cast<double>(iy);
  double area_a = static_cast<double>(a.x2 - a.x1) * static_cast<double>(a.y2 - a.y1);
  double area_b = static_cast<double>(b.x2 - b.x1) * static_cast<double>(b.y2 - b.y1);
  return inter / (area_a + area_b - inter);
}

void validate(const RenderOpts& opts) {
  require(opts.iou_cap >= 0.0 && opts.iou_cap <= 1.0, Errc::ConfigError,
          "iou_cap must lie in [0,1]");
  require(opts.max_retries >= 1, Errc::ConfigError, "max_retries must be >= 1");
  require(opts.min_size >= 1 && opts.max_size >= opts.min_size, Errc::ConfigError,
          "need 1 <= min_size <= max_size");
}

ImageBatch blank_image(int64_t width, int64_t height) {
  ImageBatch img;
  img.width = width;
  img.height = height;
  img.pixels = Tensor::zeros({height, width, 3});
  return img;
}

CountMap counts_of(const std::vector<SceneObject>& objects) {
  CountMap counts;
  for (const SceneObject& o : objects)
    ++counts[{shape_name(o.shape), color_name(o.color)}];
  return counts;
}

std::string dataset_image_name(size_t index) {
  std::ostringstream os;
  os << "img_" << std::setw(6) << std::setfill('0') << index << ".ppm";
  return os.str();
}

}  // namespace

void validate(const BBox& b) {
  require(b.x1 < b.x2 && b.y1 < b.y2, Errc::InvertedBox,
          "box corners must satisfy x1 < x2 and y1 < y2");
  require(b.x1 >= 0 && b.y1 >= 0 && b.x2 <= 1000 && b.y2 <= 1000, Errc::OutOfImage,
          "normalized coordinates must lie in [0,1000]");
}

BBox normalize_bbox(const PixelBox& px, int64_t width, int64_t height) {
  require(width >= 1 && height >= 1, Errc::InvalidValue, "image dimensions must be positive");
  require(px.x1 < px.x2 && px.y1 < px.y2, Errc::InvertedBox,
          "box corners must satisfy x1 < x2 and y1 < y2");
  require(px.x1 >= 0 && px.y1 >= 0 && px.x2 <= width && px.y2 <= height, Errc::OutOfImage,
          "pixel box extends outside the image");
  auto norm = [](int64_t c, int64_t dim) {
    int64_t v = std::llround(static_cast<double>(c) * 1000.0 / static_cast<double>(dim));
    return std::clamp<int64_t>(v, 0, 1000);
  };
  return BBox{norm(px.x1, width), norm(px.y1, height), norm(px.x2, width), norm(px.y2, height)};
}

PixelBox denormalize_bbox(const BBox& b, int64_t width, int64_t height) {
  require(width >= 1 && height >= 1, Errc::InvalidValue, "image dimensions must be positive");
  validate(b);
  auto denorm = [](int64_t c, int64_t dim) {
    return std::llround(static_cast<double>(c) * static_cast<double>(dim) / 1000.0);
  };
  return PixelBox{denorm(b.x1, width), denorm(b.y1, height), denorm(b.x2, width),
                  denorm(b.y2, height)};
}

const char* shape_name(ShapeClass s) {
  switch (s) {
    case ShapeClass::Rectangle: return "rectangle";
    case ShapeClass::Square: return "square";
    case ShapeClass::Circle: return "circle";
    case ShapeClass::Triangle: return "triangle";
  }
  return "circle";
}

const char* color_name(ColorName c) {
  switch (c) {
    case ColorName::Red: return "red";
    case ColorName::Green: return "green";
    case ColorName::Blue: return "blue";
  }
  return "red";
}

std::optional<ShapeClass> shape_from_name(const std::string& s) {
  if (s == "rectangle") return ShapeClass::Rectangle;
  if (s == "square") return ShapeClass::Square;
  if (s == "circle") return ShapeClass::Circle;
  if (s == "triangle") return ShapeClass::Triangle;
  return std::nullopt;
}

std::optional<ColorName> color_from_name(const std::string& s) {
  if (s == "red") return ColorName::Red;
  if (s == "green") return ColorName::Green;
  if (s == "blue") return ColorName::Blue;
  return std::nullopt;
}

PixelBox draw_rectangle(ImageBatch& img, int64_t x, int64_t y, int64_t w, int64_t h, ColorName c) {
  require(w >= 1 && h >= 1, Errc::InvalidValue, "rectangle must have positive extent");
  require(x >= 0 && y >= 0 && x + w <= img.width && y + h <= img.height, Errc::InvalidValue,
          "rectangle extends outside the canvas");
  for (int64_t py = y; py < y + h; ++py)
    for (int64_t px = x; px < x + w; ++px) set_pixel(img, px, py, c);
  return PixelBox{x, y, x + w, y + h};
}

PixelBox draw_circle(ImageBatch& img, int64_t x, int64_t y, int64_t radius, ColorName c) {
  require(radius >= 0, Errc::InvalidValue, "radius must be >= 0");
  int64_t d = 2 * radius + 1;
  require(x >= 0 && y >= 0 && x + d <= img.width && y + d <= img.height, Errc::InvalidValue,
          "circle extends outside the canvas");
  int64_t cx = x + radius, cy = y + radius;
  Extent ext;
  for (int64_t py = y; py < y + d; ++py)
    for (int64_t px = x; px < x + d; ++px) {
      int64_t dx = px - cx, dy = py - cy;
      if (dx * dx + dy * dy <= radius * radius) {
        set_pixel(img, px, py, c);
        ext.cover(px, py);
      }
    }
  return ext.box();
}

PixelBox draw_triangle(ImageBatch& img, int64_t x, int64_t y, int64_t base, int64_t height,
                       ColorName c) {
  require(base >= 1 && height >= 1, Errc::InvalidValue, "triangle must have positive extent");
  require(x >= 0 && y >= 0 && x + base <= img.width && y + height <= img.height,
          Errc::InvalidValue, "triangle extends outside the canvas");
  double cx = static_cast<double>(x) + static_cast<double>(base - 1) / 2.0;
  Extent ext;
  for (int64_t t = 0; t < height; ++t) {
    double half = 0.5 * static_cast<double>(base - 1) * static_cast<double>(t + 1) /
                  static_cast<double>(height);
    int64_t lo = std::clamp<int64_t>(std::llround(cx - half), x, x + base - 1);
    int64_t hi = std::clamp<int64_t>(std::llround(cx + half), x, x + base - 1);
    for (int64_t px = lo; px <= hi; ++px) {
      set_pixel(img, px, y + t, c);
      ext.cover(px, y + t);
    }
  }
  return ext.box();
}

SceneRecord render_scene(const std::vector<ObjectSpec>& spec, int64_t width, int64_t height,
                         uint64_t seed, const RenderOpts& opts) {
  validate(opts);
  require(width >= 1 && height >= 1, Errc::InvalidValue, "canvas must be non-empty");
  SceneRecord rec;
  rec.image = blank_image(width, height);
  CounterRng rng(seed);
  std::vector<PixelBox> placed;
  for (size_t i = 0; i < spec.size(); ++i) {
    const ObjectSpec& os = spec[i];
    int64_t span = opts.max_size - opts.min_size + 1;
    int64_t sa = opts.min_size + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(span)));
    int64_t sb = opts.min_size + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(span)));
    int64_t ow = 0, oh = 0;
    switch (os.shape) {
      case ShapeClass::Rectangle: ow = sa; oh = sb; break;
      case ShapeClass::Square: ow = oh = sa; break;
      case ShapeClass::Circle: ow = oh = 2 * (sa / 2) + 1; break;
      case ShapeClass::Triangle: ow = sa; oh = sb; break;
    }
    require(ow <= width && oh <= height, Errc::DoesNotFit,
            "object " + std::to_string(i) + " cannot fit the canvas");
    bool done = false;
    for (int attempt = 0; attempt < opts.max_retries && !done; ++attempt) {
      int64_t x = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(width - ow + 1)));
      int64_t y = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(height - oh + 1)));
      PixelBox cand{x, y, x + ow, y + oh};
      bool ok = true;
      for (const PixelBox& other : placed) ok = ok && iou(cand, other) <= opts.iou_cap;
      if (!ok) continue;
      SceneObject obj;
      obj.shape = os.shape;
      obj.color = os.color;
      switch (os.shape) {
        case ShapeClass::Rectangle:
          obj.pixel_bbox = draw_rectangle(rec.image, x, y, ow, oh, os.color);
          break;
        case ShapeClass::Square:
          obj.pixel_bbox = draw_rectangle(rec.image, x, y, ow, oh, os.color);
          break;
        case ShapeClass::Circle:
          obj.pixel_bbox = draw_circle(rec.image, x, y, sa / 2, os.color);
          break;
        case ShapeClass::Triangle:
          obj.pixel_bbox = draw_triangle(rec.image, x, y, ow, oh, os.color);
          break;
      }
      obj.norm_bbox = normalize_bbox(obj.pixel_bbox, width, height);
      placed.push_back(obj.pixel_bbox);
      rec.objects.push_back(obj);
      done = true;
    }
    require(done, Errc::TooCrowded,
            "no placement for object " + std::to_string(i) + " within the IoU cap");
  }
  rec.count_targets = counts_of(rec.objects);
  rec.caption = caption_from_counts(rec.count_targets);
  return rec;
}

std::string caption_from_counts(const CountMap& counts) {
  if (counts.empty()) return "an empty image";
  // Sort groups by (color, class); map keys are (class, color).
  std::vector<std::pair<std::pair<std::string, std::string>, int64_t>> groups(counts.begin(),
                                                                              counts.end());
  std::sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first.second, a.first.first) < std::tie(b.first.second, b.first.first);
  });
  std::string out;
  for (const auto& [key, count] : groups) {
    if (!out.empty()) out += " and ";
    out += std::to_string(count) + " " + key.second + " " + key.first;
    if (count != 1) out += "s";
  }
  return out;
}

std::string make_caption(const SceneRecord& record) {
  return caption_from_counts(record.count_targets);
}

std::optional<CountMap> parse_caption(const std::string& caption) {
  if (caption == "an empty image") return CountMap{};
  CountMap out;
  size_t pos = 0;
  while (pos <= caption.size()) {
    size_t next = caption.find(" and ", pos);
    std::string part =
        next == std::string::npos ? caption.substr(pos) : caption.substr(pos, next - pos);
    std::istringstream is(part);
    std::string count_str, color_str, class_str, extra;
    if (!(is >> count_str >> color_str >> class_str) || (is >> extra)) return std::nullopt;
    if (count_str.empty() || count_str.size() > 9) return std::nullopt;
    for (char c : count_str)
      if (c < '0' || c > '9') return std::nullopt;
    if (count_str.size() > 1 && count_str[0] == '0') return std::nullopt;
    int64_t count = std::stoll(count_str);
    if (count < 1) return std::nullopt;
    if (count != 1) {
      if (class_str.size() < 2 || class_str.back() != 's') return std::nullopt;
      class_str.pop_back();
    }
    std::optional<ColorName> color = color_from_name(color_str);
    std::optional<ShapeClass> shape = shape_from_name(class_str);
    if (!color || !shape) return std::nullopt;
    auto key = std::make_pair(std::string(shape_name(*shape)), std::string(color_name(*color)));
    if (out.count(key)) return std::nullopt;
    out[key] = count;
    if (next == std::string::npos) break;
    pos = next + 5;
  }
  if (out.empty()) return std::nullopt;
  return out;
}

std::vector<SceneRecord> sample_counting_dataset(int64_t n, const DatasetOpts& opts,
                                                 uint64_t seed) {
  validate(opts.render);
  require(!opts.buckets.empty() && !opts.classes.empty(), Errc::ConfigError,
          "buckets and classes must be non-empty");
  for (const auto& [lo, hi] : opts.buckets)
    require(lo >= 1 && hi >= lo, Errc::ConfigError, "count buckets must satisfy 1 <= lo <= hi");
  for (size_t i = 0; i < opts.classes.size(); ++i)
    for (size_t j = i + 1; j < opts.classes.size(); ++j)
      require(opts.classes[i] != opts.classes[j], Errc::ConfigError, "duplicate object class");
  int64_t cells =
      static_cast<int64_t>(opts.buckets.size()) * static_cast<int64_t>(opts.classes.size());
  require(n >= cells, Errc::InfeasibleBalance,
          "need at least " + std::to_string(cells) + " samples to cover every cell");
  int64_t base = n / cells, rem = n % cells;
  std::vector<SceneRecord> records;
  records.reserve(static_cast<size_t>(n));
  int64_t cell = 0;
  uint64_t idx = 0;
  for (const auto& [lo, hi] : opts.buckets) {
    for (ShapeClass cls : opts.classes) {
      int64_t quota = base + (cell < rem ? 1 : 0);
      for (int64_t k = 0; k < quota; ++k, ++idx) {
        uint64_t rec_seed = derive_seed(seed, idx);
        CounterRng aux(derive_seed(rec_seed, 1));
        int64_t count = lo + static_cast<int64_t>(aux.next_below(static_cast<uint64_t>(hi - lo + 1)));
        std::vector<ObjectSpec> spec(static_cast<size_t>(count));
        for (ObjectSpec& o : spec) {
          o.shape = cls;
          o.color = static_cast<ColorName>(aux.next_below(3));
        }
        // Dense scenes can exhaust per-object retries; redraw the whole
        // placement from a derived seed before giving up.
        SceneRecord rec;
        bool ok = false;
        for (uint64_t attempt = 0; attempt < 16 && !ok; ++attempt) {
          try {
            rec = render_scene(spec, opts.width, opts.height, derive_seed(rec_seed, 2 + attempt),
                               opts.render);
            ok = true;
          } catch (const Error& e) {
            if (e.code() != Errc::TooCrowded || attempt == 15) throw;
          }
        }
        records.push_back(std::move(rec));
      }
      ++cell;
    }
  }
  return records;
}

void write_ppm(const std::string& path, const ImageBatch& img) {
  require(img.pixels.defined() && img.pixels.rank() == 3 && img.pixels.dim(0) == img.height &&
              img.pixels.dim(1) == img.width && img.pixels.dim(2) == 3,
          Errc::ShapeMismatch, "image pixels must be [height x width x 3]");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), Errc::IoError, "cannot open " + path + " for writing");
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  const double* p = img.pixels.data();
  std::string bytes;
  bytes.reserve(static_cast<size_t>(img.pixels.numel()));
  for (int64_t i = 0; i < img.pixels.numel(); ++i) {
    long v = std::lround(std::clamp(p[i], 0.0, 1.0) * 255.0);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  require(f.good(), Errc::IoError, "failed writing " + path);
}

ImageBatch read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Errc::IoError, "cannot open " + path);
  auto next_token = [&]() -> std::string {
    std::string tok;
    int c;
    while ((c = f.get()) != EOF) {
      if (c == '#') {  // comment to end of line
        while ((c = f.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    return tok;
  };
  require(next_token() == "P6", Errc::FormatError, "not a binary PPM (P6) file: " + path);
  auto parse_dim = [&](const std::string& tok) -> int64_t {
    require(!tok.empty() && tok.size() <= 9, Errc::FormatError, "bad PPM header in " + path);
    for (char c : tok)
      require(c >= '0' && c <= '9', Errc::FormatError, "bad PPM header in " + path);
    return std::stoll(tok);
  };
  int64_t w = parse_dim(next_token());
  int64_t h = parse_dim(next_token());
  int64_t maxval = parse_dim(next_token());
  require(w >= 1 && h >= 1, Errc::FormatError, "empty PPM image in " + path);
  require(maxval == 255, Errc::FormatError, "PPM maxval must be 255 in " + path);
  std::string bytes(static_cast<size_t>(w * h * 3), '\0');
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(f.gcount() == static_cast<std::streamsize>(bytes.size()), Errc::FormatError,
          "truncated PPM payload in " + path);
  ImageBatch img;
  img.width = w;
  img.height = h;
  img.pixels = Tensor({h, w, 3});
  double* p = img.pixels.data();
  for (int64_t i = 0; i < w * h * 3; ++i)
    p[i] = static_cast<double>(static_cast<unsigned char>(bytes[static_cast<size_t>(i)])) / 255.0;
  return img;
}

void write_dataset(const std::string& dir, const std::vector<SceneRecord>& records) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, Errc::IoError, "cannot create directory " + dir);
  std::ofstream f(dir + "/data.jsonl", std::ios::trunc);
  require(f.good(), Errc::IoError, "cannot open " + dir + "/data.jsonl for writing");
  for (size_t i = 0; i < records.size(); ++i) {
    const SceneRecord& rec = records[i];
    std::string image_name = dataset_image_name(i);
    write_ppm(dir + "/" + image_name, rec.image);
    nlohmann::json j;
    j["image"] = image_name;
    nlohmann::json objs = nlohmann::json::array();
    for (const SceneObject& o : rec.objects) {
      nlohmann::json oj;
      oj["class"] = shape_name(o.shape);
      oj["color"] = color_name(o.color);
      oj["bbox"] = {o.norm_bbox.x1, o.norm_bbox.y1, o.norm_bbox.x2, o.norm_bbox.y2};
      objs.push_back(std::move(oj));
    }
    j["objects"] = std::move(objs);
    j["caption"] = rec.caption;
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [key, count] : rec.count_targets)
      counts[key.second + " " + key.first] = count;  // "<color> <class>"
    j["counts"] = std::move(counts);
    f << j.dump() << "\n";
  }
  f.flush();
  require(f.good(), Errc::IoError, "failed writing " + dir + "/data.jsonl");
}

std::vector<SceneRecord> load_dataset(const std::string& jsonl_path) {
  std::ifstream f(jsonl_path);
  require(f.good(), Errc::IoError, "cannot open " + jsonl_path);
  std::filesystem::path dir = std::filesystem::path(jsonl_path).parent_path();
  std::vector<SceneRecord> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::string where = jsonl_path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      raise(Errc::FormatError, "bad JSON at " + where + ": " + e.what());
    }
    require(j.is_object() && j.contains("image") && j.contains("objects") &&
                j.contains("caption") && j.contains("counts"),
            Errc::FormatError, "missing record fields at " + where);
    SceneRecord rec;
    require(j["image"].is_string(), Errc::FormatError, "image must be a path at " + where);
    rec.image = read_ppm((dir / j["image"].get<std::string>()).string());
    require(j["objects"].is_array(), Errc::FormatError, "objects must be an array at " + where);
    for (const nlohmann::json& oj : j["objects"]) {
      require(oj.is_object() && oj.contains("class") && oj.contains("color") &&
                  oj.contains("bbox") && oj["bbox"].is_array() && oj["bbox"].size() == 4,
              Errc::FormatError, "bad object entry at " + where);
      SceneObject o;
      std::optional<ShapeClass> shape = shape_from_name(oj["class"].get<std::string>());
      std::optional<ColorName> color = color_from_name(oj["color"].get<std::string>());
      require(shape.has_value() && color.has_value(), Errc::FormatError,
              "unknown class or color at " + where);
      o.shape = *shape;
      o.color = *color;
      o.norm_bbox = BBox{oj["bbox"][0].get<int64_t>(), oj["bbox"][1].get<int64_t>(),
                         oj["bbox"][2].get<int64_t>(), oj["bbox"][3].get<int64_t>()};
      try {
        validate(o.norm_bbox);
        o.pixel_bbox = denormalize_bbox(o.norm_bbox, rec.image.width, rec.image.height);
      } catch (const Error& e) {
        raise(Errc::FormatError, "invalid bbox at " + where + ": " + e.what());
      }
      rec.objects.push_back(std::move(o));
    }
    require(j["caption"].is_string(), Errc::FormatError, "caption must be text at " + where);
    rec.caption = j["caption"].get<std::string>();
    require(j["counts"].is_object(), Errc::FormatError, "counts must be an object at " + where);
    for (auto it = j["counts"].begin(); it != j["counts"].end(); ++it) {
      size_t space = it.key().find(' ');
      require(space != std::string::npos && it.value().is_number_integer(), Errc::FormatError,
              "bad counts entry at " + where);
      std::string color_str = it.key().substr(0, space);
      std::string class_str = it.key().substr(space + 1);
      require(color_from_name(color_str).has_value() && shape_from_name(class_str).has_value(),
              Errc::FormatError, "unknown counts key at " + where);
      rec.count_targets[{class_str, color_str}] = it.value().get<int64_t>();
    }
    records.push_back(std::move(rec));
  }
  require(!records.empty(), Errc::FormatError, "dataset holds no records: " + jsonl_path);
  return records;
}

}  // namespace exms
