#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "musr/io.hpp"

namespace musr {

inline constexpr const char* kToolVersion = "musr 0.1.0";

// Record of one CLI run: command, effective configuration, seed, input file
// hashes and timings. Written atomically next to the run's outputs; enough
// to reproduce the run bit-for-bit given the same inputs and build.
class RunManifest {
public:
    explicit RunManifest(std::string command) : command_(std::move(command)) {
        start_ = std::chrono::steady_clock::now();
    }

    void set(const std::string& key, const std::string& value) { entries_[key] = value; }
    void set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }
    void set(const std::string& key, double value) {
        std::ostringstream os;
        os.precision(17);
        os << value;
        set(key, os.str());
    }

    void add_input(const std::string& path) {
        std::ostringstream os;
        os << std::hex << fnv1a_file(path);
        entries_["input." + path] = os.str();
    }

    void add_output(const std::string& name, const std::string& path) {
        entries_["output." + name] = path;
    }

    void write(const std::string& path) const {
        const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                                 std::chrono::steady_clock::now() - start_)
                                 .count();
        atomic_write(
            path,
            [&](std::ostream& os) {
                os << "command=" << command_ << "\n";
                os << "tool_version=" << kToolVersion << "\n";
                for (const auto& [k, v] : entries_) os << k << "=" << v << "\n";
                os << "elapsed_ms=" << elapsed << "\n";
            },
            false);
    }

private:
    std::string command_;
    std::map<std::string, std::string> entries_;
    std::chrono::steady_clock::time_point start_;
};

}  // namespace musr
