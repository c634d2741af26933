#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>

namespace ehrgpt {

/// ICD-9 source code -> ICD-10 code.
using IcdMapping = std::map<std::string, std::string, std::less<>>;

/// Small desk-scale General Equivalence Mapping subset shipped with the library.
const IcdMapping& default_icd_mapping();

/// Two-column text file (icd9, icd10), tab/comma/space separated, '#' comments.
IcdMapping load_icd_mapping(const std::filesystem::path& path);
void save_icd_mapping(const IcdMapping& mapping, const std::filesystem::path& path);

/// Mapped code for a known ICD-9 code, otherwise the input unchanged.
std::string map_icd9_to_icd10(std::string_view code, const IcdMapping& mapping);

/// Category part of a code: everything before the decimal point.
std::string truncate_icd(std::string_view code);

/// Mapping followed by truncation.
std::string normalize_diagnosis(std::string_view code, const IcdMapping& mapping);

struct IcdChapter {
    std::string_view id;     // e.g. "C00-D49"
    std::string_view first;  // inclusive 3-character bounds
    std::string_view last;
    std::string_view title;
    bool evaluated;  // one of the 14 higher-level evaluation categories
};

/// All ICD-10-CM chapters in code order.
std::span<const IcdChapter> icd_chapters();

/// True for letter + two digits (e.g. "E11").
bool is_icd10_category(std::string_view code);

/// Chapter containing a 3-character category. Throws DataError when the code
/// is malformed or falls outside every chapter.
const IcdChapter& icd_chapter(std::string_view category);

/// Chapter by id ("F01-F99"); throws DataError if unknown.
const IcdChapter& chapter_by_id(std::string_view id);

}  // namespace ehrgpt
