#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "s3t/common.hpp"

namespace s3t {

// One accounting line per named layer. potential_ops is the dense op count of
// the layer; the executed_* fields record what actually ran once spike
// sparsity is taken into account. input_units / input_positions capture the
// activity of the operand stream driving a sparse layer so the rate-based
// estimate potential * (units/positions) can be cross-checked against the
// executed count.
struct LayerTally {
  std::uint64_t potential_ops = 0;
  std::uint64_t executed_macs = 0;
  std::uint64_t executed_sops = 0;
  std::uint64_t bitwise_ands = 0;
  std::uint64_t neuron_steps = 0;
  std::uint64_t spike_events = 0;
  std::uint64_t input_units = 0;
  std::uint64_t input_positions = 0;

  void merge(const LayerTally& o) {
    potential_ops += o.potential_ops;
    executed_macs += o.executed_macs;
    executed_sops += o.executed_sops;
    bitwise_ands += o.bitwise_ands;
    neuron_steps += o.neuron_steps;
    spike_events += o.spike_events;
    input_units += o.input_units;
    input_positions += o.input_positions;
  }
};

class OpCounter {
 public:
  LayerTally& layer(const std::string& name) { return layers_[name]; }

  const std::map<std::string, LayerTally>& layers() const { return layers_; }

  bool has(const std::string& name) const { return layers_.count(name) > 0; }

  const LayerTally& at(const std::string& name) const {
    auto it = layers_.find(name);
    if (it == layers_.end()) fail<Error>("op counter has no layer '", name, "'");
    return it->second;
  }

  // Merging is associative and commutative: used when evaluation shards run
  // on worker threads and their counters are folded back together.
  void merge(const OpCounter& o) {
    for (const auto& [name, tally] : o.layers_) layers_[name].merge(tally);
  }

  std::uint64_t total_macs() const {
    std::uint64_t s = 0;
    for (const auto& [n, t] : layers_) s += t.executed_macs;
    return s;
  }

  std::uint64_t total_sops() const {
    std::uint64_t s = 0;
    for (const auto& [n, t] : layers_) s += t.executed_sops;
    return s;
  }

  std::uint64_t total_potential() const {
    std::uint64_t s = 0;
    for (const auto& [n, t] : layers_) s += t.potential_ops;
    return s;
  }

 private:
  std::map<std::string, LayerTally> layers_;
};

enum class OperandKind { binary, integer, real };
enum class OpClass { mac, sop, bitand_op };

// Synaptic-op classification: two binary operands collapse to a bitwise AND,
// a spike or small-integer operand against a real weight degenerates to
// accumulate-only work (one AC per unit of the integer operand), and only
// genuinely real-real products cost a full MAC.
inline OpClass classify_op(OperandKind lhs, OperandKind rhs) {
  if (lhs == OperandKind::binary && rhs == OperandKind::binary)
    return OpClass::bitand_op;
  if (lhs == OperandKind::real && rhs == OperandKind::real) return OpClass::mac;
  return OpClass::sop;
}

// Records one linear layer execution. `fanout` is the number of synapses each
// active input unit feeds (output channels for a projection, nodes for the
// topology mix). For real inputs every potential op executes as a MAC.
inline void record_linear(LayerTally& t, OperandKind input_kind,
                          std::uint64_t potential_ops, std::uint64_t input_units,
                          std::uint64_t input_positions, std::uint64_t fanout) {
  t.potential_ops += potential_ops;
  t.input_positions += input_positions;
  switch (classify_op(input_kind, OperandKind::real)) {
    case OpClass::mac:
      t.input_units += input_positions;
      t.executed_macs += potential_ops;
      break;
    case OpClass::sop:
      t.input_units += input_units;
      t.executed_sops += input_units * fanout;
      break;
    case OpClass::bitand_op:
      fail<Error>("binary x binary is not a linear layer");
  }
}

struct EnergyConstants {
  double e_mac_pj = 4.6;
  double e_ac_pj = 0.9;
};

struct EnergyLine {
  std::string name;
  std::uint64_t potential_ops = 0;
  std::uint64_t macs = 0;
  std::uint64_t sops = 0;
  std::uint64_t ands = 0;
  double energy_pj = 0;
};

struct EnergyReport {
  EnergyConstants constants;
  std::vector<EnergyLine> lines;
  std::uint64_t total_macs = 0;
  std::uint64_t total_sops = 0;
  double e_snn_joules = 0;
  double e_ann_joules = 0;
  double snn_to_ann_ratio = 0;
};

EnergyReport energy(const OpCounter& counter, const EnergyConstants& constants);
std::string energy_report_json(const EnergyReport& report);

// Firing-rate table in the layout of the layer-wise rate summary: one row per
// block, the canonical seven spiking layers as columns, plus an Avg row.
// A cell is nullopt when the layer never stepped (rate undefined).
struct FiringRateTable {
  std::vector<std::string> columns;
  std::vector<std::string> row_labels;
  std::vector<std::vector<std::optional<double>>> rates;
};

extern const std::vector<std::string> kSpikingLayerColumns;

std::string block_layer_key(int block_one_based, const std::string& column);

FiringRateTable firing_rates(const OpCounter& counter, int n_blocks);
std::string firing_rates_csv(const FiringRateTable& table);

}  // namespace s3t
