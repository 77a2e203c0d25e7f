#pragma once

// Text-bank file format: bank.json describing every prompt entry plus one
// STF token matrix per prompt under tokens/. Banks are written once (pseudo
// embedding or import of external matrices) and loaded read-only.

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "satd/align.hpp"
#include "satd/stf.hpp"
#include "satd/synthetic.hpp"

namespace satd {

inline void save_text_bank(const std::filesystem::path& dir, const TextBank& bank) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "tokens");
    nlohmann::json entries = nlohmann::json::object();
    for (const auto& [id, entry] : bank.entries()) {
        const std::string file = cat("tokens/", id, ".stf");
        stf_write(dir / file, entry.tokens);
        entries[id] = {{"caption", entry.caption},
                       {"instruction", entry.instruction},
                       {"k", entry.tokens.dims()[0]},
                       {"file", file}};
    }
    nlohmann::json j = {{"format", "satd-bank-v1"},
                        {"d_t", bank.token_width()},
                        {"source", bank.source() == BankSource::pseudo ? "pseudo" : "file"},
                        {"entries", entries}};
    std::ofstream out(dir / "bank.json", std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out) throw IoError(cat("bank: cannot write '", (dir / "bank.json").string(), "'"));
}

inline TextBank load_text_bank(const std::filesystem::path& dir) {
    std::ifstream in(dir / "bank.json");
    if (!in) throw DataError(cat("bank: cannot open '", (dir / "bank.json").string(), "'"));
    nlohmann::json j;
    in >> j;
    TextBank bank(j.at("d_t").get<std::size_t>(),
                  j.at("source").get<std::string>() == "pseudo" ? BankSource::pseudo
                                                                : BankSource::file);
    for (const auto& [id, e] : j.at("entries").items()) {
        Tensor tokens = stf_read(dir / e.at("file").get<std::string>());
        bank.insert(id, tokens, e.at("caption").get<std::string>(),
                    e.at("instruction").get<std::string>());
    }
    bank.seal();
    return bank;
}

enum class BankMode { pseudo, import };

// Build a bank from a prompt manifest. Pseudo mode embeds the composed
// instruction-augmented prompt deterministically; import mode pairs manifest
// ids with externally produced STF token matrices.
inline TextBank emit_text_bank(const std::vector<PromptRow>& manifest, BankMode mode,
                               std::size_t d_t, std::size_t k, std::uint64_t pseudo_seed,
                               const std::filesystem::path& import_dir = {}) {
    TextBank bank(d_t, mode == BankMode::pseudo ? BankSource::pseudo : BankSource::file);
    std::vector<std::string> missing;
    for (const PromptRow& row : manifest) {
        const std::string instruction = instruction_list()[row.instruction_index];
        if (mode == BankMode::pseudo) {
            const std::string prompt = build_prompt(row.caption, row.instruction_index);
            bank.insert(row.prompt_id, pseudo_embed(prompt, d_t, k, pseudo_seed), row.caption,
                        instruction);
        } else {
            const auto file = import_dir / (row.prompt_id + ".stf");
            if (!std::filesystem::exists(file)) {
                missing.push_back(row.prompt_id);
                continue;
            }
            bank.insert(row.prompt_id, stf_read(file), row.caption, instruction);
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < missing.size(); ++i)
            list += (i ? ", " : "") + missing[i];
        throw DataError(cat("bank import: missing token files for prompt ids: ", list));
    }
    bank.seal();
    return bank;
}

}  // namespace satd
