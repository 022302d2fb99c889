#pragma once

// Product hierarchy: UPC -> (category, class, subclass) plus optional marginal
// cost and optional observable item covariates (extra numeric columns).

#include <cmath>
#include <string>
#include <vector>

#include "nestfact/common.hpp"
#include "nestfact/text.hpp"

namespace nestfact {

struct ProductHierarchy {
  IdTable upcs;
  IdTable categories;
  IdTable classes;
  IdTable subclasses;
  std::vector<int> category_of;  // indexed by item
  std::vector<int> class_of;
  std::vector<int> subclass_of;
  std::vector<double> cost;  // NaN when missing
  Matrix item_covariates;    // n_items x M; M may be 0

  int n_items() const { return upcs.size(); }
  int n_categories() const { return categories.size(); }
  bool has_cost(int item) const { return !std::isnan(cost[static_cast<std::size_t>(item)]); }
};

// File layout: upc, category, class, subclass, cost [, x1, x2, ...]
// cost may be empty (missing); extra numeric columns become item covariates.
inline ProductHierarchy load_hierarchy(const std::string& path, char sep = ',') {
  auto lines = read_lines(path);
  if (lines.empty()) throw DataError("empty hierarchy file " + path);
  auto header = split_fields(lines[0], sep);
  if (header.size() < 5 || header[0] != "upc" || header[1] != "category" || header[2] != "class" ||
      header[3] != "subclass" || header[4] != "cost")
    throw DataError("hierarchy header must start with upc,category,class,subclass,cost");
  const int n_cov = static_cast<int>(header.size()) - 5;

  ProductHierarchy h;
  std::vector<double> cov_rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const int line_no = static_cast<int>(i) + 1;
    auto f = split_fields(lines[i], sep);
    if (f.size() != header.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    if (h.upcs.lookup(f[0]) >= 0)
      throw DataError("line " + std::to_string(line_no) + ": duplicate upc " + f[0]);
    h.upcs.intern(f[0]);
    h.category_of.push_back(h.categories.intern(f[1]));
    h.class_of.push_back(h.classes.intern(f[2]));
    h.subclass_of.push_back(h.subclasses.intern(f[3]));
    if (f[4].empty()) {
      h.cost.push_back(std::nan(""));
    } else {
      double c = parse_double(f[4], line_no, "cost");
      if (!(c > 0.0)) throw DataError("line " + std::to_string(line_no) + ": cost must be positive");
      h.cost.push_back(c);
    }
    for (int k = 0; k < n_cov; ++k)
      cov_rows.push_back(parse_double(f[5 + static_cast<std::size_t>(k)], line_no, "covariate"));
  }
  if (h.n_items() == 0) throw DataError("hierarchy has no items");
  h.item_covariates = Matrix(h.n_items(), n_cov);
  h.item_covariates.data() = cov_rows;
  return h;
}

inline void save_hierarchy(const ProductHierarchy& h, const std::string& path, char sep = ',') {
  std::string out = "upc";
  const char s[2] = {sep, 0};
  out += s;
  out += "category";
  out += s;
  out += "class";
  out += s;
  out += "subclass";
  out += s;
  out += "cost";
  for (int k = 0; k < h.item_covariates.cols(); ++k) out += std::string(s) + "x" + std::to_string(k + 1);
  out += "\n";
  char buf[64];
  for (int j = 0; j < h.n_items(); ++j) {
    out += h.upcs.name(j);
    out += s;
    out += h.categories.name(h.category_of[j]);
    out += s;
    out += h.classes.name(h.class_of[j]);
    out += s;
    out += h.subclasses.name(h.subclass_of[j]);
    out += s;
    if (h.has_cost(j)) {
      std::snprintf(buf, sizeof(buf), "%.2f", h.cost[j]);
      out += buf;
    }
    for (int k = 0; k < h.item_covariates.cols(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.6g", h.item_covariates(j, k));
      out += s;
      out += buf;
    }
    out += "\n";
  }
  write_file(path, out);
}

}  // namespace nestfact
