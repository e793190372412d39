#pragma once

// CSV ingestion/export of per-student data and within-school edges, and the
// flat dotted key = value configuration format.

#include "peerfx/common.hpp"
#include "peerfx/netgraph.hpp"
#include "peerfx/structsim.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace peerfx::io {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Splits one CSV line; double-quoted fields may contain commas and "" escapes.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;

  Index column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<Index>(i);
    return -1;
  }
};

inline CsvTable read_csv(std::istream& in, const std::string& what) {
  CsvTable t;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw InputError("io", what + " line " + std::to_string(ln) + ": expected " +
                                 std::to_string(t.header.size()) + " fields, found " + std::to_string(cells.size()));
    t.rows.push_back(std::move(cells));
    t.line_numbers.push_back(ln);
  }
  if (t.header.empty()) throw InputError("io", what + ": empty file");
  return t;
}

inline CsvTable read_csv_file(const std::string& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw InputError("io", "cannot open " + what + " file '" + path + "'");
  return read_csv(in, what);
}

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "NaN" || s == "nan"; }

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if (!s.empty() && *b == '+') ++b;
  const auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e) return std::nullopt;
  return v;
}

/// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct CategoricalSpec {
  std::string column;
  std::string omitted;
};

struct IngestOptions {
  std::string outcome = "gpa";
  std::vector<CategoricalSpec> categorical;
  std::vector<std::string> drop_columns;  // ignored covariates
};

struct Dataset {
  std::vector<SchoolNetwork> nets;
  std::vector<SchoolData> data;
  std::vector<std::string> covariate_names;
  std::vector<std::vector<std::string>> node_ids;  // per school, in row order
  bool has_outcome = false;
  Warnings warnings;
};

/// Builds per-school networks and data from a nodes table and an edges
/// table (school_id, src, dst). Categorical columns are one-hot encoded in
/// sorted category order without the omitted level.
inline Dataset ingest(const CsvTable& nodes, const CsvTable& edges, const IngestOptions& opt = {}) {
  const Index cs = nodes.column("school_id"), cn = nodes.column("node_id");
  if (cs < 0 || cn < 0) throw InputError("io", "nodes file needs school_id and node_id columns");
  const Index cy = nodes.column(opt.outcome);
  std::map<std::string, std::string> cat_omit;
  for (const auto& c : opt.categorical) {
    if (nodes.column(c.column) < 0) throw InputError("io", "categorical column '" + c.column + "' not found");
    cat_omit[c.column] = c.omitted;
  }
  const std::set<std::string> dropped(opt.drop_columns.begin(), opt.drop_columns.end());

  // Covariate layout.
  struct Col {
    Index src;
    std::string name;
    std::optional<std::string> level;  // one-hot level
  };
  std::vector<Col> cols;
  for (std::size_t h = 0; h < nodes.header.size(); ++h) {
    const auto& name = nodes.header[h];
    const Index hi = static_cast<Index>(h);
    if (hi == cs || hi == cn || hi == cy || dropped.count(name)) continue;
    const auto it = cat_omit.find(name);
    if (it == cat_omit.end()) {
      cols.push_back({hi, name, std::nullopt});
      continue;
    }
    std::set<std::string> levels;
    for (std::size_t r = 0; r < nodes.rows.size(); ++r) {
      const auto& v = nodes.rows[r][h];
      if (is_missing(v))
        throw InputError("io", "nodes line " + std::to_string(nodes.line_numbers[r]) + ": missing value in column '" +
                                   name + "'");
      levels.insert(v);
    }
    if (!levels.count(it->second))
      throw InputError("io", "omitted category '" + it->second + "' does not occur in column '" + name + "'");
    for (const auto& l : levels)
      if (l != it->second) cols.push_back({hi, name + "_" + l, l});
  }

  Dataset ds;
  ds.has_outcome = cy >= 0;
  for (const auto& c : cols) ds.covariate_names.push_back(c.name);

  std::vector<std::string> school_order;
  std::unordered_map<std::string, std::size_t> school_index;
  std::vector<std::unordered_map<std::string, int>> node_index;
  std::vector<std::vector<std::size_t>> rows_of;
  for (std::size_t r = 0; r < nodes.rows.size(); ++r) {
    const auto& row = nodes.rows[r];
    const auto& sid = row[static_cast<std::size_t>(cs)];
    const auto& nid = row[static_cast<std::size_t>(cn)];
    if (sid.empty() || nid.empty())
      throw InputError("io", "nodes line " + std::to_string(nodes.line_numbers[r]) + ": empty school_id or node_id");
    auto [it, fresh] = school_index.emplace(sid, school_order.size());
    if (fresh) {
      school_order.push_back(sid);
      node_index.emplace_back();
      rows_of.emplace_back();
      ds.node_ids.emplace_back();
    }
    auto& idx = node_index[it->second];
    if (!idx.emplace(nid, static_cast<int>(idx.size())).second)
      throw InputError("io", "duplicate node '" + nid + "' in school '" + sid + "'");
    rows_of[it->second].push_back(r);
    ds.node_ids[it->second].push_back(nid);
  }

  std::vector<std::vector<std::vector<int>>> links(school_order.size());
  for (std::size_t s = 0; s < school_order.size(); ++s) links[s].resize(rows_of[s].size());
  const Index es = edges.column("school_id"), e0 = edges.column("src"), e1 = edges.column("dst");
  if (es < 0 || e0 < 0 || e1 < 0) throw InputError("io", "edges file needs school_id, src and dst columns");
  std::vector<std::string> cross;
  for (std::size_t r = 0; r < edges.rows.size(); ++r) {
    const auto& row = edges.rows[r];
    const auto& sid = row[static_cast<std::size_t>(es)];
    const auto& a = row[static_cast<std::size_t>(e0)];
    const auto& b = row[static_cast<std::size_t>(e1)];
    const std::string where = "edges line " + std::to_string(edges.line_numbers[r]);
    const auto si = school_index.find(sid);
    if (si == school_index.end()) throw InputError("io", where + ": unknown school '" + sid + "'");
    const auto& idx = node_index[si->second];
    const auto ia = idx.find(a), ib = idx.find(b);
    if (ia == idx.end() || ib == idx.end()) {
      // Distinguish a node of another school from one that does not exist.
      const std::string& bad = ia == idx.end() ? a : b;
      bool elsewhere = false;
      for (const auto& other : node_index) elsewhere = elsewhere || other.count(bad);
      if (elsewhere) {
        cross.push_back(sid + ":" + a + "->" + b);
        continue;
      }
      throw InputError("io", where + ": unknown node '" + bad + "' in school '" + sid + "'");
    }
    links[si->second][static_cast<std::size_t>(ia->second)].push_back(ib->second);
  }
  if (!cross.empty()) {
    std::string msg = "cross-school edges are not allowed:";
    for (const auto& c : cross) msg += " " + c;
    throw InputError("io", msg);
  }

  for (std::size_t s = 0; s < school_order.size(); ++s) {
    const Index n = static_cast<Index>(rows_of[s].size());
    SchoolData d;
    d.X.resize(n, static_cast<Index>(cols.size()));
    if (ds.has_outcome) d.y.resize(n);
    for (Index i = 0; i < n; ++i) {
      const std::size_t r = rows_of[s][static_cast<std::size_t>(i)];
      const auto& row = nodes.rows[r];
      const std::string where = "nodes line " + std::to_string(nodes.line_numbers[r]);
      for (std::size_t c = 0; c < cols.size(); ++c) {
        const auto& cell = row[static_cast<std::size_t>(cols[c].src)];
        if (is_missing(cell)) throw InputError("io", where + ": missing value in column '" + nodes.header[static_cast<std::size_t>(cols[c].src)] + "'");
        if (cols[c].level) {
          d.X(i, static_cast<Index>(c)) = cell == *cols[c].level ? 1.0 : 0.0;
        } else {
          const auto v = parse_double(cell);
          if (!v)
            throw InputError("io", where + ": non-numeric value '" + cell + "' in column '" + cols[c].name +
                                       "' (declare it categorical)");
          d.X(i, static_cast<Index>(c)) = *v;
        }
      }
      if (ds.has_outcome) {
        const auto& cell = row[static_cast<std::size_t>(cy)];
        const auto v = is_missing(cell) ? std::nullopt : parse_double(cell);
        if (!v) throw InputError("io", where + ": missing or non-numeric outcome");
        d.y(i) = *v;
      }
    }
    SchoolNetwork net(school_order[s], n, std::move(links[s]));
    if (net.duplicate_links())
      ds.warnings.push_back({"io", "school " + school_order[s] + ": " + std::to_string(net.duplicate_links()) +
                                       " duplicate edges ignored"});
    ds.nets.push_back(std::move(net));
    ds.data.push_back(std::move(d));
  }
  return ds;
}

inline Dataset ingest_files(const std::string& nodes_path, const std::string& edges_path,
                            const IngestOptions& opt = {}) {
  return ingest(read_csv_file(nodes_path, "nodes"), read_csv_file(edges_path, "edges"), opt);
}

/// Writes the numeric (already encoded) covariates and outcome.
inline void write_nodes_csv(std::ostream& os, const Dataset& ds, const std::string& outcome = "gpa") {
  os << "school_id,node_id";
  for (const auto& n : ds.covariate_names) os << ',' << n;
  if (ds.has_outcome) os << ',' << outcome;
  os << '\n';
  for (std::size_t s = 0; s < ds.nets.size(); ++s) {
    const auto& d = ds.data[s];
    for (Index i = 0; i < ds.nets[s].n(); ++i) {
      os << ds.nets[s].school_id() << ','
         << (ds.node_ids.size() > s ? ds.node_ids[s][static_cast<std::size_t>(i)] : std::to_string(i + 1));
      for (Index k = 0; k < d.X.cols(); ++k) os << ',' << format_double(d.X(i, k));
      if (ds.has_outcome) os << ',' << format_double(d.y(i));
      os << '\n';
    }
  }
}

inline void write_edges_csv(std::ostream& os, const Dataset& ds) {
  os << "school_id,src,dst\n";
  for (std::size_t s = 0; s < ds.nets.size(); ++s) {
    const auto& net = ds.nets[s];
    auto id = [&](int i) {
      return ds.node_ids.size() > s ? ds.node_ids[s][static_cast<std::size_t>(i)] : std::to_string(i + 1);
    };
    for (Index i = 0; i < net.n(); ++i)
      for (int j : net.links()[static_cast<std::size_t>(i)]) os << net.school_id() << ',' << id(static_cast<int>(i)) << ',' << id(j) << '\n';
  }
}

/// Dataset from simulated schools, with nodes numbered 1..n.
inline Dataset make_dataset(std::vector<SchoolNetwork> nets, std::vector<SchoolData> data,
                            std::vector<std::string> covariate_names) {
  Dataset ds;
  ds.nets = std::move(nets);
  ds.data = std::move(data);
  ds.covariate_names = std::move(covariate_names);
  ds.has_outcome = !ds.data.empty() && ds.data.front().y.size() > 0;
  for (const auto& n : ds.nets) {
    std::vector<std::string> ids;
    for (Index i = 0; i < n.n(); ++i) ids.push_back(std::to_string(i + 1));
    ds.node_ids.push_back(std::move(ids));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Flat configuration: one `dotted.key = value` per line, '#' comments.

class Config {
 public:
  static Config parse(std::istream& in, const std::string& source = "config") {
    Config c;
    std::string line;
    std::size_t ln = 0;
    while (std::getline(in, line)) {
      ++ln;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("cli", source + " line " + std::to_string(ln) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError("cli", source + " line " + std::to_string(ln) + ": empty key");
      if (c.values_.count(key))
        throw ConfigError("cli", source + " line " + std::to_string(ln) + ": duplicate key '" + key + "'");
      c.values_[key] = trim(line.substr(eq + 1));
    }
    return c;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cli", "cannot open config file '" + path + "'");
    return parse(in, path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& def) const {
    const auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }

  double get_double(const std::string& key, double def) const {
    if (!has(key)) return def;
    const auto v = parse_double(values_.at(key));
    if (!v) throw ConfigError("cli", "config key '" + key + "' is not a number");
    return *v;
  }

  long long get_int(const std::string& key, long long def) const {
    if (!has(key)) return def;
    const auto& s = values_.at(key);
    long long v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw ConfigError("cli", "config key '" + key + "' is not an integer");
    return v;
  }

  std::vector<double> get_list(const std::string& key, std::vector<double> def) const {
    if (!has(key)) return def;
    std::vector<double> out;
    std::stringstream ss(values_.at(key));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      const auto v = parse_double(trim(tok));
      if (!v) throw ConfigError("cli", "config key '" + key + "' must be a comma-separated list of numbers");
      out.push_back(*v);
    }
    return out;
  }

  /// Keys not in `known`, for strict validation.
  std::vector<std::string> unknown_keys(const std::set<std::string>& known) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!known.count(k)) out.push_back(k);
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace peerfx::io
