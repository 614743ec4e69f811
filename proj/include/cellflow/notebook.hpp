#pragma once

#include <filesystem>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "cellflow/cell.hpp"
#include "cellflow/error.hpp"

namespace cellflow {

class SerializationError : public Error {
public:
    using Error::Error;
};

struct SessionMeta {
    std::string session_id;
    std::string language_tag = "python";
    std::string model;
    /// Rich payload paths in cell outputs are resolved against this directory.
    std::filesystem::path workdir;
};

/// Builds an nbformat 4.5 document from the active-path cells.
nlohmann::json export_notebook(std::span<const Cell> trace, const SessionMeta& meta);

/// export_notebook + dump; throws SerializationError for payloads that are
/// not valid UTF-8 text.
std::string export_notebook_text(std::span<const Cell> trace, const SessionMeta& meta);

}  // namespace cellflow
