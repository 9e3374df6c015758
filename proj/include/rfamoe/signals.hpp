#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "rfamoe/config.hpp"

namespace rfamoe {

/// [n, C, T] multichannel signals: per channel a random fundamental with
/// 1/h-decaying harmonics, an optional pulse train, Gaussian noise, then
/// standardization to zero mean and unit variance.
Tensor synth_generate(const SyntheticConfig& cfg);

enum class SignalFormat { automatic, csv, tsb1 };

SignalFormat parse_signal_format(const std::string& text);

/// CSV: header channel_0..channel_{C-1}, one row per time step, one file per
/// sample; a directory loads every *.csv in name order. TSB1: a [n,C,T] or
/// [C,T] tensor. `automatic` picks by extension (.tsb1) or directory.
Tensor load_signals(const std::filesystem::path& path, SignalFormat format = SignalFormat::automatic);
/// A single-sample CSV stream, returned as [1, C, T].
Tensor read_signal_csv(std::istream& in, const std::string& origin = "<csv>");

/// TSB1 to a file, or CSV to a directory of sample_NNNN.csv files.
void save_signals(const std::filesystem::path& path, const Tensor& signals,
                  SignalFormat format = SignalFormat::automatic);
void write_signal_csv(std::ostream& out, const Tensor& signals, std::size_t sample);

}  // namespace rfamoe
