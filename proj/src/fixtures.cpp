#include "qsr/fixtures.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace qsr {

namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& where, const std::string& what) {
  throw validation_error("fixture " + where + ": " + what);
}

cplx parse_pair(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    bad(where, "expected a [re, im] pair, got " + j.dump());
  return cplx(j[0].get<double>(), j[1].get<double>());
}

Cvec parse_state(const json& j, int n, const std::string& where) {
  if (!j.is_array() || int(j.size()) != n)
    bad(where, "expected " + std::to_string(n) + " [re, im] pairs, got " +
                   std::to_string(j.is_array() ? j.size() : 0) + " entries");
  Cvec v(n);
  for (int i = 0; i < n; ++i)
    v[i] = parse_pair(j[std::size_t(i)], where + "[" + std::to_string(i) + "]");
  return v;
}

Cmat parse_matrix(const json& j, int n, const std::string& where) {
  if (!j.is_array() || int(j.size()) != n * n)
    bad(where, "expected a row-major array of " + std::to_string(n * n) +
                   " [re, im] pairs, got " +
                   std::to_string(j.is_array() ? j.size() : 0) + " entries");
  Cmat m(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      m(r, c) = parse_pair(j[std::size_t(r * n + c)],
                           where + "[" + std::to_string(r * n + c) + "]");
  return m;
}

json pair_json(cplx z) { return json::array({z.real(), z.imag()}); }

json state_json(const Cvec& v) {
  auto a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(pair_json(v[i]));
  return a;
}

json matrix_json(const Cmat& m) {
  auto a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) a.push_back(pair_json(m(r, c)));
  return a;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) bad(where, "unknown field '" + key + "'");
  }
}

std::string path_stem(const std::string& path) {
  const auto slash = path.find_last_of("/\\");
  std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
  const auto dot = base.find_last_of('.');
  return dot == std::string::npos ? base : base.substr(0, dot);
}

Fixture finalise(Fixture f) {
  f.hash = fnv1a64(fixture_to_json(f).dump());
  return f;
}

}  // namespace

Fixture load_fixture(const std::string& path, const Tolerances& tol) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw config_error("cannot open fixture file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw config_error("fixture file " + path +
                       " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) bad(path, "top level must be an object");
  check_keys(j, {"dimension", "matrix", "spectral", "state", "mixture", "name",
                 "description"},
             path);

  if (!j.contains("dimension") || !j["dimension"].is_number_integer())
    bad(path, "field 'dimension' must be a positive integer");
  const int n = j["dimension"].get<int>();
  if (n < 1) bad(path, "field 'dimension' must be >= 1, got " +
                            std::to_string(n));

  Fixture f;
  f.dimension = n;
  f.name = j.contains("name") && j["name"].is_string()
               ? j["name"].get<std::string>()
               : path_stem(path);

  const bool has_matrix = j.contains("matrix");
  const bool has_spectral = j.contains("spectral");
  if (has_matrix == has_spectral)
    bad(path, "exactly one of 'matrix' or 'spectral' is required");
  if (has_matrix) {
    f.observable = parse_matrix(j["matrix"], n, path + ":matrix");
    f.dec = spectral_decompose(f.observable, -1.0, tol);
  } else {
    const json& sp = j["spectral"];
    if (!sp.is_object()) bad(path, "'spectral' must be an object");
    check_keys(sp, {"eigenvalues", "projectors"}, path + ":spectral");
    if (!sp.contains("eigenvalues") || !sp["eigenvalues"].is_array())
      bad(path, "'spectral.eigenvalues' must be an array of numbers");
    if (!sp.contains("projectors") || !sp["projectors"].is_array())
      bad(path, "'spectral.projectors' must be an array of matrices");
    std::vector<double> evals;
    for (const auto& e : sp["eigenvalues"]) {
      if (!e.is_number())
        bad(path, "'spectral.eigenvalues' must be an array of numbers");
      evals.push_back(e.get<double>());
    }
    std::vector<Cmat> projs;
    for (std::size_t k = 0; k < sp["projectors"].size(); ++k)
      projs.push_back(parse_matrix(
          sp["projectors"][k], n,
          path + ":spectral.projectors[" + std::to_string(k) + "]"));
    if (evals.size() != projs.size())
      bad(path, "'spectral' needs one projector per eigenvalue (got " +
                    std::to_string(evals.size()) + " eigenvalues, " +
                    std::to_string(projs.size()) + " projectors)");
    f.dec = spectral_from_data(evals, projs, tol);
    f.observable = f.dec.observable;
    f.spectral_input = true;
  }

  const bool has_state = j.contains("state");
  const bool has_mixture = j.contains("mixture");
  if (has_state == has_mixture)
    bad(path, "exactly one of 'state' or 'mixture' is required");
  if (has_state) {
    f.init = InitialCondition::pure(parse_state(j["state"], n, path + ":state"));
  } else {
    const json& mx = j["mixture"];
    if (!mx.is_array() || mx.empty())
      bad(path, "'mixture' must be a non-empty array of {weight, state}");
    std::vector<std::pair<double, StateVector>> parts;
    for (std::size_t k = 0; k < mx.size(); ++k) {
      const std::string where = path + ":mixture[" + std::to_string(k) + "]";
      const json& m = mx[k];
      if (!m.is_object()) bad(where, "expected an object {weight, state}");
      check_keys(m, {"weight", "state"}, where);
      if (!m.contains("weight") || !m["weight"].is_number())
        bad(where, "field 'weight' must be a number");
      if (!m.contains("state"))
        bad(where, "field 'state' is required");
      parts.emplace_back(m["weight"].get<double>(),
                         parse_state(m["state"], n, where + ".state"));
    }
    f.init = InitialCondition::mixture(std::move(parts));
  }
  f.init.validate(n, tol);
  return finalise(std::move(f));
}

Fixture builtin_fixture(const std::string& name) {
  Fixture f;
  f.name = name;
  if (name == "qubit") {
    f.dimension = 2;
    f.observable = Cmat::Zero(2, 2);
    f.observable(1, 1) = 1.0;
    Cvec psi(2);
    psi << cplx(0.5, 0.0), cplx(std::sqrt(0.75), 0.0);
    f.init = InitialCondition::pure(psi);
  } else if (name == "spin-pair" || name == "spin-pair-mixed") {
    f.dimension = 4;
    f.observable = Cmat::Zero(4, 4);
    f.observable(0, 0) = -1.0;
    f.observable(3, 3) = 1.0;
    Cvec uniform = Cvec::Constant(4, cplx(0.5, 0.0));
    if (name == "spin-pair") {
      f.init = InitialCondition::pure(uniform);
    } else {
      Cvec ends(4);
      const double r = 1.0 / std::sqrt(2.0);
      ends << cplx(r, 0.0), cplx(0.0, 0.0), cplx(0.0, 0.0), cplx(r, 0.0);
      f.init = InitialCondition::mixture({{0.5, uniform}, {0.5, ends}});
    }
  } else {
    throw config_error("unknown builtin fixture '" + name +
                       "' (available: qubit, spin-pair, spin-pair-mixed)");
  }
  f.dec = spectral_decompose(f.observable);
  f.init.validate(f.dimension);
  return finalise(std::move(f));
}

std::vector<std::string> builtin_names() {
  return {"qubit", "spin-pair", "spin-pair-mixed"};
}

nlohmann::ordered_json fixture_to_json(const Fixture& f) {
  nlohmann::ordered_json j;
  j["name"] = f.name;
  j["dimension"] = f.dimension;
  j["matrix"] = matrix_json(f.observable);
  if (f.init.is_pure()) {
    j["state"] = state_json(f.init.components.front().second);
  } else {
    auto mx = nlohmann::ordered_json::array();
    for (const auto& [w, psi] : f.init.components) {
      nlohmann::ordered_json m;
      m["weight"] = w;
      m["state"] = state_json(psi);
      mx.push_back(std::move(m));
    }
    j["mixture"] = std::move(mx);
  }
  return j;
}

void save_fixture(const Fixture& f, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot write fixture file: " + path);
  out << fixture_to_json(f).dump(2) << "\n";
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace qsr
