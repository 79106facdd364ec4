#include "s3t/energy.hpp"

#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

namespace s3t {

const std::vector<std::string> kSpikingLayerColumns = {
    "Q", "K", "V", "Topo Buffer", "Attn Out", "MLP 1", "MLP 2"};

std::string block_layer_key(int block_one_based, const std::string& column) {
  return "block" + std::to_string(block_one_based) + "/" + column;
}

EnergyReport energy(const OpCounter& counter, const EnergyConstants& constants) {
  EnergyReport r;
  r.constants = constants;
  double snn_pj = 0, ann_pj = 0;
  for (const auto& [name, t] : counter.layers()) {
    EnergyLine line;
    line.name = name;
    line.potential_ops = t.potential_ops;
    line.macs = t.executed_macs;
    line.sops = t.executed_sops;
    line.ands = t.bitwise_ands;
    line.energy_pj = static_cast<double>(t.executed_macs) * constants.e_mac_pj +
                     static_cast<double>(t.executed_sops) * constants.e_ac_pj;
    snn_pj += line.energy_pj;
    ann_pj += static_cast<double>(t.potential_ops) * constants.e_mac_pj;
    r.total_macs += t.executed_macs;
    r.total_sops += t.executed_sops;
    r.lines.push_back(std::move(line));
  }
  r.e_snn_joules = snn_pj * 1e-12;
  r.e_ann_joules = ann_pj * 1e-12;
  r.snn_to_ann_ratio = ann_pj > 0 ? snn_pj / ann_pj : 0.0;
  return r;
}

std::string energy_report_json(const EnergyReport& report) {
  nlohmann::json j;
  j["constants"] = {{"e_mac_pj", report.constants.e_mac_pj},
                    {"e_ac_pj", report.constants.e_ac_pj}};
  j["layers"] = nlohmann::json::array();
  for (const auto& line : report.lines) {
    j["layers"].push_back({{"name", line.name},
                           {"potential_ops", line.potential_ops},
                           {"macs", line.macs},
                           {"sops", line.sops},
                           {"bitwise_ands", line.ands},
                           {"energy_pj", line.energy_pj}});
  }
  j["totals"] = {{"macs", report.total_macs},
                 {"sops", report.total_sops},
                 {"e_snn_joules", report.e_snn_joules},
                 {"e_ann_joules", report.e_ann_joules},
                 {"snn_to_ann_ratio", report.snn_to_ann_ratio}};
  return j.dump(2);
}

FiringRateTable firing_rates(const OpCounter& counter, int n_blocks) {
  FiringRateTable table;
  table.columns = kSpikingLayerColumns;
  std::vector<double> col_sum(kSpikingLayerColumns.size(), 0.0);
  std::vector<int> col_count(kSpikingLayerColumns.size(), 0);

  for (int l = 1; l <= n_blocks; ++l) {
    table.row_labels.push_back(std::to_string(l));
    std::vector<std::optional<double>> row;
    for (std::size_t c = 0; c < kSpikingLayerColumns.size(); ++c) {
      const std::string key = block_layer_key(l, kSpikingLayerColumns[c]);
      std::optional<double> rate;
      if (counter.has(key)) {
        const LayerTally& t = counter.at(key);
        if (t.neuron_steps > 0) {
          rate = static_cast<double>(t.spike_events) /
                 static_cast<double>(t.neuron_steps);
          col_sum[c] += *rate;
          col_count[c] += 1;
        }
      }
      row.push_back(rate);
    }
    table.rates.push_back(std::move(row));
  }

  table.row_labels.push_back("Avg");
  std::vector<std::optional<double>> avg;
  for (std::size_t c = 0; c < kSpikingLayerColumns.size(); ++c) {
    if (col_count[c] == static_cast<int>(n_blocks) && n_blocks > 0) {
      avg.push_back(col_sum[c] / n_blocks);
    } else {
      avg.push_back(std::nullopt);
    }
  }
  table.rates.push_back(std::move(avg));
  return table;
}

std::string firing_rates_csv(const FiringRateTable& table) {
  std::string csv = "Block";
  for (const auto& col : table.columns) csv += "," + col;
  csv += "\n";
  char buf[32];
  for (std::size_t r = 0; r < table.rates.size(); ++r) {
    csv += table.row_labels[r];
    for (const auto& cell : table.rates[r]) {
      if (cell) {
        std::snprintf(buf, sizeof(buf), "%.2f", *cell * 100.0);
        csv += ",";
        csv += buf;
      } else {
        csv += ",undefined";
      }
    }
    csv += "\n";
  }
  return csv;
}

}  // namespace s3t
