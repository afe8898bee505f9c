#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "banditd/errors.hpp"
#include "banditd/json_io.hpp"

namespace banditd {

enum class FeatureKind { Categorical, Numeric };

/// One input attribute and how it is projected into the fine block and the
/// binned coarse block.
struct FeatureDescriptor {
  std::string name;
  FeatureKind kind = FeatureKind::Categorical;

  // categorical
  std::vector<std::string> categories;
  std::map<std::string, std::string> coarse_merge_map;
  bool other_slot = true;  // unseen values land in a reserved trailing slot
  std::optional<std::string> missing_category;

  // numeric
  std::vector<double> bin_edges;

  bool nullable = false;

  // Derived: coarse categories in order of first appearance over `categories`.
  std::vector<std::string> coarse_categories;

  std::size_t fine_width() const {
    if (kind == FeatureKind::Numeric) return 1;
    return categories.size() + (other_slot ? 1 : 0);
  }
  std::size_t coarse_width() const {
    if (kind == FeatureKind::Numeric) return bin_edges.size() + 1 + (nullable ? 1 : 0);
    return coarse_categories.size() + (other_slot ? 1 : 0);
  }
};

/// Immutable once constructed; the encoded dimension depends on nothing but
/// the descriptor list.
class FeatureSchema {
 public:
  static constexpr int kSchemaVersion = 1;

  FeatureSchema() = default;

  explicit FeatureSchema(std::vector<FeatureDescriptor> features) : features_(std::move(features)) {
    validate_and_derive();
  }

  const std::vector<FeatureDescriptor>& features() const { return features_; }

  std::size_t fine_dimension() const { return fine_dim_; }
  std::size_t coarse_dimension() const { return coarse_dim_; }
  std::size_t dimension() const { return fine_dim_ + coarse_dim_; }

  /// True when every coordinate of every encoding is 0/1 (no raw numerics).
  bool is_binary() const {
    return std::none_of(features_.begin(), features_.end(),
                        [](const auto& f) { return f.kind == FeatureKind::Numeric; });
  }

  /// Human-readable label per unified coordinate: `f=v` (fine), `f~v` (coarse).
  std::vector<std::string> dimension_names() const {
    std::vector<std::string> fine, coarse;
    for (const auto& f : features_) {
      if (f.kind == FeatureKind::Categorical) {
        for (const auto& c : f.categories) fine.push_back(f.name + "=" + c);
        if (f.other_slot) fine.push_back(f.name + "=<other>");
        for (const auto& c : f.coarse_categories) coarse.push_back(f.name + "~" + c);
        if (f.other_slot) coarse.push_back(f.name + "~<other>");
      } else {
        fine.push_back(f.name);
        for (std::size_t b = 0; b <= f.bin_edges.size(); ++b)
          coarse.push_back(f.name + "~bin" + std::to_string(b));
        if (f.nullable) coarse.push_back(f.name + "~<missing>");
      }
    }
    fine.insert(fine.end(), coarse.begin(), coarse.end());
    return fine;
  }

  static FeatureSchema from_json(const json& j) {
    try {
      if (j.contains("schema_version") && j.at("schema_version").get<int>() != kSchemaVersion)
        fail(ErrorCode::SchemaViolation, "unsupported schema_version");
      std::vector<FeatureDescriptor> feats;
      for (const auto& fj : j.at("features")) {
        FeatureDescriptor f;
        f.name = fj.at("name").get<std::string>();
        const auto kind = fj.at("kind").get<std::string>();
        if (kind == "categorical") {
          f.kind = FeatureKind::Categorical;
          f.categories = fj.at("categories").get<std::vector<std::string>>();
          f.coarse_merge_map = fj.at("coarse_merge_map").get<std::map<std::string, std::string>>();
          f.other_slot = fj.value("other_slot", true);
          if (fj.contains("missing_category")) f.missing_category = fj.at("missing_category").get<std::string>();
        } else if (kind == "numeric") {
          f.kind = FeatureKind::Numeric;
          f.bin_edges = fj.at("bin_edges").get<std::vector<double>>();
        } else {
          fail(ErrorCode::SchemaViolation, "feature " + f.name + ": unknown kind " + kind);
        }
        f.nullable = fj.value("nullable", false);
        feats.push_back(std::move(f));
      }
      return FeatureSchema(std::move(feats));
    } catch (const json::exception& e) {
      fail(ErrorCode::SchemaViolation, e.what());
    }
  }

  json to_json() const {
    json feats = json::array();
    for (const auto& f : features_) {
      json fj = {{"name", f.name}, {"nullable", f.nullable}};
      if (f.kind == FeatureKind::Categorical) {
        fj["kind"] = "categorical";
        fj["categories"] = f.categories;
        fj["coarse_merge_map"] = f.coarse_merge_map;
        fj["other_slot"] = f.other_slot;
        if (f.missing_category) fj["missing_category"] = *f.missing_category;
      } else {
        fj["kind"] = "numeric";
        fj["bin_edges"] = f.bin_edges;
      }
      feats.push_back(std::move(fj));
    }
    return {{"schema_version", kSchemaVersion}, {"features", feats}};
  }

 private:
  void validate_and_derive() {
    std::set<std::string> names;
    fine_dim_ = coarse_dim_ = 0;
    for (auto& f : features_) {
      if (f.name.empty() || !names.insert(f.name).second)
        fail(ErrorCode::SchemaViolation, "feature names must be unique and non-empty");
      if (f.kind == FeatureKind::Numeric) {
        if (f.bin_edges.empty()) fail(ErrorCode::SchemaViolation, f.name + ": needs at least one bin edge");
        for (std::size_t i = 0; i < f.bin_edges.size(); ++i) {
          if (!std::isfinite(f.bin_edges[i])) fail(ErrorCode::SchemaViolation, f.name + ": non-finite bin edge");
          if (i > 0 && !(f.bin_edges[i - 1] < f.bin_edges[i]))
            fail(ErrorCode::SchemaViolation, f.name + ": bin edges must be strictly ascending");
        }
      } else {
        if (f.categories.empty()) fail(ErrorCode::SchemaViolation, f.name + ": no categories");
        std::set<std::string> seen(f.categories.begin(), f.categories.end());
        if (seen.size() != f.categories.size()) fail(ErrorCode::SchemaViolation, f.name + ": duplicate category");
        if (f.coarse_merge_map.size() != f.categories.size())
          fail(ErrorCode::SchemaViolation, f.name + ": coarse_merge_map must cover each category exactly once");
        f.coarse_categories.clear();
        for (const auto& c : f.categories) {
          auto it = f.coarse_merge_map.find(c);
          if (it == f.coarse_merge_map.end())
            fail(ErrorCode::SchemaViolation, f.name + ": category " + c + " missing from coarse_merge_map");
          if (std::find(f.coarse_categories.begin(), f.coarse_categories.end(), it->second) ==
              f.coarse_categories.end())
            f.coarse_categories.push_back(it->second);
        }
        if (f.missing_category && !seen.count(*f.missing_category))
          fail(ErrorCode::SchemaViolation, f.name + ": missing_category is not a declared category");
        if (f.nullable && !f.missing_category)
          fail(ErrorCode::SchemaViolation, f.name + ": nullable categorical needs missing_category");
      }
      fine_dim_ += f.fine_width();
      coarse_dim_ += f.coarse_width();
    }
    if (features_.empty()) fail(ErrorCode::SchemaViolation, "schema has no features");
  }

  std::vector<FeatureDescriptor> features_;
  std::size_t fine_dim_ = 0;
  std::size_t coarse_dim_ = 0;
};

/// Fine block, coarse block and their concatenation (the model input).
class ContextVector {
 public:
  ContextVector() = default;

  ContextVector(std::vector<double> fine, std::vector<double> coarse)
      : fine_(std::move(fine)), coarse_(std::move(coarse)) {
    unified_.reserve(fine_.size() + coarse_.size());
    unified_.insert(unified_.end(), fine_.begin(), fine_.end());
    unified_.insert(unified_.end(), coarse_.begin(), coarse_.end());
  }

  const std::vector<double>& fine() const { return fine_; }
  const std::vector<double>& coarse() const { return coarse_; }
  const std::vector<double>& unified() const { return unified_; }
  std::size_t dimension() const { return unified_.size(); }

  /// Byte image of the unified vector; the identity used for cell keying.
  std::string key() const {
    std::string k(unified_.size() * sizeof(double), '\0');
    if (!unified_.empty()) std::memcpy(k.data(), unified_.data(), k.size());
    return k;
  }

  friend bool operator==(const ContextVector& a, const ContextVector& b) { return a.key() == b.key(); }

  json to_json() const { return {{"fine", fine_}, {"coarse", coarse_}}; }

  static ContextVector from_json(const json& j) {
    try {
      return ContextVector(j.at("fine").get<std::vector<double>>(), j.at("coarse").get<std::vector<double>>());
    } catch (const json::exception& e) {
      fail(ErrorCode::CorruptData, std::string("context: ") + e.what());
    }
  }

 private:
  std::vector<double> fine_;
  std::vector<double> coarse_;
  std::vector<double> unified_;
};

namespace detail {

inline std::optional<std::string> categorical_value(const json& v) {
  if (v.is_null()) return std::nullopt;
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  return v.dump();
}

}  // namespace detail

/// Projects a flat attribute map onto the schema's fine/coarse encodings.
inline ContextVector encode(const json& raw, const FeatureSchema& schema) {
  if (!raw.is_object()) fail(ErrorCode::SchemaViolation, "raw attributes must be an object");
  std::vector<double> fine(schema.fine_dimension(), 0.0);
  std::vector<double> coarse(schema.coarse_dimension(), 0.0);
  std::size_t fo = 0, co = 0;
  for (const auto& f : schema.features()) {
    auto it = raw.find(f.name);
    const bool missing = it == raw.end() || it->is_null();
    if (missing && !f.nullable) fail(ErrorCode::SchemaViolation, "missing feature " + f.name);

    if (f.kind == FeatureKind::Categorical) {
      std::string value = missing ? *f.missing_category : *detail::categorical_value(*it);
      auto pos = std::find(f.categories.begin(), f.categories.end(), value);
      if (pos == f.categories.end()) {
        if (!f.other_slot) fail(ErrorCode::InvalidValue, f.name + ": unknown category " + value);
        fine[fo + f.categories.size()] = 1.0;
        coarse[co + f.coarse_categories.size()] = 1.0;
      } else {
        fine[fo + static_cast<std::size_t>(pos - f.categories.begin())] = 1.0;
        const auto& merged = f.coarse_merge_map.at(value);
        auto cpos = std::find(f.coarse_categories.begin(), f.coarse_categories.end(), merged);
        coarse[co + static_cast<std::size_t>(cpos - f.coarse_categories.begin())] = 1.0;
      }
    } else {
      if (missing) {
        fine[fo] = 0.0;
        coarse[co + f.bin_edges.size() + 1] = 1.0;
      } else {
        if (!it->is_number()) fail(ErrorCode::InvalidValue, f.name + ": expected a number");
        double v = it->get<double>();
        if (!std::isfinite(v)) fail(ErrorCode::InvalidValue, f.name + ": non-finite value");
        if (v == 0.0) v = 0.0;  // fold -0.0 so byte keys agree
        fine[fo] = v;
        const auto bin = std::upper_bound(f.bin_edges.begin(), f.bin_edges.end(), v) - f.bin_edges.begin();
        coarse[co + static_cast<std::size_t>(bin)] = 1.0;
      }
    }
    fo += f.fine_width();
    co += f.coarse_width();
  }
  return ContextVector(std::move(fine), std::move(coarse));
}

/// Number of differing coordinates of two binary unified vectors.
inline std::size_t hamming(const ContextVector& a, const ContextVector& b) {
  if (a.dimension() != b.dimension()) fail(ErrorCode::DimensionError, "hamming: dimension mismatch");
  std::size_t d = 0;
  const auto& u = a.unified();
  const auto& v = b.unified();
  for (std::size_t i = 0; i < u.size(); ++i) {
    if ((u[i] != 0.0 && u[i] != 1.0) || (v[i] != 0.0 && v[i] != 1.0))
      fail(ErrorCode::InvalidValue, "hamming: non-binary coordinate");
    d += u[i] != v[i];
  }
  return d;
}

}  // namespace banditd
