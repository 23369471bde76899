#include "ulm/coco_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "ulm/geometry.hpp"

namespace ulm::coco {

namespace {

using ordered_json = nlohmann::ordered_json;

double round6(double x) { return std::round(x * 1e6) / 1e6; }

std::string frame_file_name(int frame_id) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "frames/frame_%06d.ulmf", frame_id);
  return buf;
}

const ordered_json& require(const ordered_json& j, const char* key,
                            const char* ctx) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw CocoSchemaError(std::string("coco: missing key '") + key + "' in " +
                          ctx);
  }
  return *it;
}

template <typename T>
T as(const ordered_json& j, const char* key, const char* ctx) {
  const ordered_json& v = require(j, key, ctx);
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw CocoSchemaError(std::string("coco: key '") + key + "' in " + ctx +
                          " has the wrong type");
  }
}

}  // namespace

CocoDataset to_coco(const std::vector<sim::SimulatedFrame>& frames,
                    const std::string& category_name) {
  if (frames.empty()) {
    throw ValidationError("to_coco: need at least one frame");
  }
  CocoDataset d;
  d.categories.push_back({kMicrobubbleCategoryId, category_name});
  std::int64_t next_ann_id = 1;
  for (const auto& sf : frames) {
    d.images.push_back({sf.frame.frame_id, frame_file_name(sf.frame.frame_id),
                        sf.frame.width, sf.frame.height});
    for (const auto& item : sf.gt) {
      const geom::BBoxA abs =
          geom::to_absolute(item.box, sf.frame.width, sf.frame.height);
      const double w = abs.width();
      const double h = abs.height();
      if (!(w > 0.0) || !(h > 0.0)) {
        throw ValidationError("to_coco: ground-truth box has non-positive "
                              "area after conversion");
      }
      CocoAnnotation a;
      a.id = next_ann_id++;
      a.image_id = sf.frame.frame_id;
      a.category_id = kMicrobubbleCategoryId;
      a.bbox = {abs.x0, abs.y0, w, h};
      a.area = w * h;
      a.iscrowd = 0;
      d.annotations.push_back(a);
    }
  }
  return d;
}

void save(const CocoDataset& d, const std::filesystem::path& path) {
  CocoDataset s = d;
  std::sort(s.images.begin(), s.images.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  std::sort(s.annotations.begin(), s.annotations.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  std::sort(s.categories.begin(), s.categories.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });

  ordered_json j;
  j["images"] = ordered_json::array();
  for (const auto& im : s.images) {
    ordered_json o;
    o["id"] = im.id;
    o["file_name"] = im.file_name;
    o["width"] = im.width;
    o["height"] = im.height;
    j["images"].push_back(std::move(o));
  }
  j["annotations"] = ordered_json::array();
  for (const auto& a : s.annotations) {
    ordered_json o;
    o["id"] = a.id;
    o["image_id"] = a.image_id;
    o["category_id"] = a.category_id;
    o["bbox"] = {round6(a.bbox[0]), round6(a.bbox[1]), round6(a.bbox[2]),
                 round6(a.bbox[3])};
    o["area"] = round6(a.area);
    o["iscrowd"] = a.iscrowd;
    j["annotations"].push_back(std::move(o));
  }
  j["categories"] = ordered_json::array();
  for (const auto& c : s.categories) {
    ordered_json o;
    o["id"] = c.id;
    o["name"] = c.name;
    j["categories"].push_back(std::move(o));
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw ValidationError("cannot open for write: " + path.string());
  }
  os << j.dump(2) << "\n";
  if (!os) {
    throw ValidationError("write failed: " + path.string());
  }
}

CocoDataset load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw ValidationError("cannot open: " + path.string());
  }
  ordered_json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw CocoParseError("coco: malformed JSON in " + path.string() + ": " +
                         e.what());
  }
  if (!j.is_object()) {
    throw CocoSchemaError("coco: top level is not an object");
  }

  CocoDataset d;
  for (const auto& im : require(j, "images", "dataset")) {
    CocoImage rec;
    rec.id = as<std::int64_t>(im, "id", "image");
    rec.file_name = as<std::string>(im, "file_name", "image");
    rec.width = as<int>(im, "width", "image");
    rec.height = as<int>(im, "height", "image");
    d.images.push_back(std::move(rec));
  }
  for (const auto& an : require(j, "annotations", "dataset")) {
    CocoAnnotation rec;
    rec.id = as<std::int64_t>(an, "id", "annotation");
    rec.image_id = as<std::int64_t>(an, "image_id", "annotation");
    rec.category_id = as<int>(an, "category_id", "annotation");
    const auto bbox = as<std::vector<double>>(an, "bbox", "annotation");
    if (bbox.size() != 4) {
      throw CocoSchemaError("coco: annotation bbox must have 4 entries");
    }
    std::copy(bbox.begin(), bbox.end(), rec.bbox.begin());
    rec.area = as<double>(an, "area", "annotation");
    rec.iscrowd = as<int>(an, "iscrowd", "annotation");
    d.annotations.push_back(rec);
  }
  for (const auto& c : require(j, "categories", "dataset")) {
    CocoCategory rec;
    rec.id = as<int>(c, "id", "category");
    rec.name = as<std::string>(c, "name", "category");
    d.categories.push_back(std::move(rec));
  }

  // Referential integrity and value domains.
  std::unordered_set<std::int64_t> image_ids;
  for (const auto& im : d.images) {
    if (!image_ids.insert(im.id).second) {
      throw CocoIntegrityError("coco: referential integrity: duplicate image "
                               "id " + std::to_string(im.id));
    }
  }
  std::unordered_set<int> category_ids;
  for (const auto& c : d.categories) {
    if (!category_ids.insert(c.id).second) {
      throw CocoIntegrityError(
          "coco: referential integrity: duplicate category id " +
          std::to_string(c.id));
    }
  }
  std::unordered_set<std::int64_t> ann_ids;
  for (const auto& a : d.annotations) {
    if (!ann_ids.insert(a.id).second) {
      throw CocoIntegrityError(
          "coco: referential integrity: duplicate annotation id " +
          std::to_string(a.id));
    }
    if (!image_ids.count(a.image_id)) {
      throw CocoIntegrityError(
          "coco: referential integrity: annotation " + std::to_string(a.id) +
          " references missing image " + std::to_string(a.image_id));
    }
    if (!category_ids.count(a.category_id)) {
      throw CocoIntegrityError(
          "coco: referential integrity: annotation " + std::to_string(a.id) +
          " references missing category " + std::to_string(a.category_id));
    }
    if (!(a.bbox[2] > 0.0) || !(a.bbox[3] > 0.0)) {
      throw CocoIntegrityError("coco: annotation " + std::to_string(a.id) +
                               " has non-positive box size");
    }
    // area == w*h up to the 6-decimal serialization rounding of each factor.
    const double tol = 2e-6 * (a.bbox[2] + a.bbox[3] + 1.0) + 1e-9;
    if (std::abs(a.area - a.bbox[2] * a.bbox[3]) > tol) {
      throw CocoIntegrityError("coco: annotation " + std::to_string(a.id) +
                               " area does not match bbox");
    }
    if (a.iscrowd != 0) {
      throw CocoIntegrityError("coco: annotation " + std::to_string(a.id) +
                               " has unsupported iscrowd != 0");
    }
  }
  return d;
}

}  // namespace ulm::coco
