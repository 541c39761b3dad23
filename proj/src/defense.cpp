#include "fedleak/defense.hpp"

#include <stdexcept>

#include "fedleak/random.hpp"

namespace fedleak {

void DefenseConfig::validate() const {
  switch (kind) {
    case DefenseKind::None:
      break;
    case DefenseKind::Gaussian:
    case DefenseKind::Laplacian:
      if (strength < 0.0)
        throw std::invalid_argument("defense: noise sigma must be >= 0");
      break;
    case DefenseKind::Pruning:
      if (strength < 0.0 || strength > 1.0)
        throw std::invalid_argument("defense: drop probability must be in [0,1]");
      break;
  }
}

DefenseKind parse_defense_kind(const std::string& name) {
  if (name == "none") return DefenseKind::None;
  if (name == "gaussian") return DefenseKind::Gaussian;
  if (name == "laplacian") return DefenseKind::Laplacian;
  if (name == "pruning") return DefenseKind::Pruning;
  throw std::invalid_argument("defense: unknown kind '" + name + "'");
}

std::string defense_kind_name(DefenseKind kind) {
  switch (kind) {
    case DefenseKind::None: return "none";
    case DefenseKind::Gaussian: return "gaussian";
    case DefenseKind::Laplacian: return "laplacian";
    case DefenseKind::Pruning: return "pruning";
  }
  return "none";
}

Array apply_defense(const Array& update, const DefenseConfig& cfg) {
  cfg.validate();
  Array out = update;
  switch (cfg.kind) {
    case DefenseKind::None:
      break;
    case DefenseKind::Gaussian: {
      if (cfg.strength == 0.0) break;
      SeedStream s = SeedStream(cfg.seed).child("defense/gaussian");
      for (double& v : out.data) v += s.normal(0.0, cfg.strength);
      break;
    }
    case DefenseKind::Laplacian: {
      if (cfg.strength == 0.0) break;
      SeedStream s = SeedStream(cfg.seed).child("defense/laplacian");
      for (double& v : out.data) v += s.laplace(cfg.strength);
      break;
    }
    case DefenseKind::Pruning: {
      SeedStream s = SeedStream(cfg.seed).child("defense/pruning");
      for (double& v : out.data)
        if (s.uniform() < cfg.strength) v = 0.0;
      break;
    }
  }
  return out;
}

}  // namespace fedleak
