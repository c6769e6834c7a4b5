// fixtures.hpp — observable/state fixture files (JSON) and the built-in
// systems used throughout the test-suite and CLI.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qsr/hilbert.hpp"
#include "qsr/sde.hpp"

namespace qsr {

/// A loaded system: validated spectral data plus the initial condition.
struct Fixture {
  std::string name;
  int dimension = 0;
  Cmat observable;            ///< dense Hermitian matrix (as loaded or rebuilt)
  SpectralDecomposition dec;  ///< validated decomposition
  InitialCondition init;      ///< pure state or mixture
  bool spectral_input = false;  ///< observable supplied in spectral form
  std::uint64_t hash = 0;       ///< FNV-1a of the canonical serialisation
};

/// Load and validate a fixture file.
///
/// Schema: an object with fields
///   dimension : integer N >= 1
///   matrix    : row-major array of N*N [re, im] pairs        (either this
///   spectral  : { eigenvalues: [..], projectors: [matrix..] }  or this)
///   state     : array of N [re, im] pairs                    (either this
///   mixture   : array of { weight, state }                     or this)
/// plus optional `name` and `description`. Unknown fields are rejected.
///
/// Missing file or unparsable JSON -> config_error naming the path;
/// schema/consistency violations -> validation_error naming the field.
Fixture load_fixture(const std::string& path, const Tolerances& tol = {});

/// The built-in systems: "qubit" (levels 0/1, amplitudes (1/2, sqrt(3)/2)),
/// "spin-pair" (levels -1,0,0,+1, uniform amplitudes) and "spin-pair-mixed"
/// (same observable, an equal mixture of the uniform state and
/// (1,0,0,1)/sqrt(2)). Throws config_error for unknown names.
Fixture builtin_fixture(const std::string& name);
std::vector<std::string> builtin_names();

/// Canonical serialisation (dense matrix form) and its file writer.
nlohmann::ordered_json fixture_to_json(const Fixture& f);
void save_fixture(const Fixture& f, const std::string& path);

/// FNV-1a 64-bit over bytes; the hash every artifact embeds.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hash_hex(std::uint64_t h);

}  // namespace qsr
