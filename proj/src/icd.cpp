#include "ehrgpt/icd.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "ehrgpt/errors.hpp"

namespace ehrgpt {

const IcdMapping& default_icd_mapping() {
    static const IcdMapping mapping{
        {"155.0", "C22.0"},  {"157.9", "C25.9"},   {"191.9", "C71.9"},  {"244.9", "E03.9"},
        {"250.00", "E11.9"}, {"272.4", "E78.5"},   {"278.00", "E66.9"}, {"296.20", "F32.9"},
        {"296.30", "F33.9"}, {"300.00", "F41.9"},  {"311", "F32.9"},    {"327.23", "G47.33"},
        {"401.9", "I10"},    {"414.01", "I25.10"}, {"427.31", "I48.91"}, {"428.0", "I50.9"},
        {"434.91", "I63.9"}, {"465.9", "J06.9"},   {"493.90", "J45.909"}, {"496", "J44.9"},
        {"530.81", "K21.9"}, {"577.1", "K86.1"},   {"585.6", "N18.6"},  {"599.0", "N39.0"},
        {"710.0", "M32.9"},  {"714.0", "M06.9"},   {"715.96", "M17.9"}, {"724.2", "M54.5"},
    };
    return mapping;
}

IcdMapping load_icd_mapping(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open ICD mapping file " + path.string());
    }
    IcdMapping mapping;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        for (char& c : line) {
            if (c == ',' || c == '\t') {
                c = ' ';
            }
        }
        std::istringstream fields(line);
        std::string icd9, icd10, extra;
        if (!(fields >> icd9)) {
            continue;
        }
        if (!(fields >> icd10) || (fields >> extra)) {
            throw ParseError("expected two columns (icd9, icd10)", line_no);
        }
        mapping[icd9] = icd10;
    }
    return mapping;
}

void save_icd_mapping(const IcdMapping& mapping, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write ICD mapping file " + path.string());
    }
    out << "# icd9\ticd10\n";
    for (const auto& [icd9, icd10] : mapping) {
        out << icd9 << '\t' << icd10 << '\n';
    }
}

std::string map_icd9_to_icd10(std::string_view code, const IcdMapping& mapping) {
    if (const auto it = mapping.find(code); it != mapping.end()) {
        return it->second;
    }
    return std::string(code);
}

std::string truncate_icd(std::string_view code) {
    return std::string(code.substr(0, code.find('.')));
}

std::string normalize_diagnosis(std::string_view code, const IcdMapping& mapping) {
    return truncate_icd(map_icd9_to_icd10(code, mapping));
}

namespace {

constexpr std::array<IcdChapter, 22> kChapters{{
    {"A00-B99", "A00", "B99", "Certain infectious and parasitic diseases", true},
    {"C00-D49", "C00", "D49", "Neoplasms", true},
    {"D50-D89", "D50", "D89", "Diseases of the blood and immune mechanism", true},
    {"E00-E89", "E00", "E89", "Endocrine, nutritional and metabolic diseases", true},
    {"F01-F99", "F01", "F99", "Mental, behavioral and neurodevelopmental disorders", true},
    {"G00-G99", "G00", "G99", "Diseases of the nervous system", true},
    {"H00-H59", "H00", "H59", "Diseases of the eye and adnexa", true},
    {"H60-H95", "H60", "H95", "Diseases of the ear and mastoid process", true},
    {"I00-I99", "I00", "I99", "Diseases of the circulatory system", true},
    {"J00-J99", "J00", "J99", "Diseases of the respiratory system", true},
    {"K00-K95", "K00", "K95", "Diseases of the digestive system", true},
    {"L00-L99", "L00", "L99", "Diseases of the skin and subcutaneous tissue", true},
    {"M00-M99", "M00", "M99", "Diseases of the musculoskeletal system and connective tissue", true},
    {"N00-N99", "N00", "N99", "Diseases of the genitourinary system", true},
    {"O00-O9A", "O00", "O9A", "Pregnancy, childbirth and the puerperium", false},
    {"P00-P96", "P00", "P96", "Certain conditions originating in the perinatal period", false},
    {"Q00-Q99", "Q00", "Q99", "Congenital malformations and chromosomal abnormalities", false},
    {"R00-R99", "R00", "R99", "Symptoms, signs and abnormal findings", false},
    {"S00-T88", "S00", "T88", "Injury, poisoning and external causes", false},
    {"U00-U85", "U00", "U85", "Codes for special purposes", false},
    {"V00-Y99", "V00", "Y99", "External causes of morbidity", false},
    {"Z00-Z99", "Z00", "Z99", "Factors influencing health status", false},
}};

}  // namespace

std::span<const IcdChapter> icd_chapters() { return kChapters; }

bool is_icd10_category(std::string_view code) {
    return code.size() == 3 && code[0] >= 'A' && code[0] <= 'Z' && code[1] >= '0' && code[1] <= '9' &&
           code[2] >= '0' && code[2] <= '9';
}

const IcdChapter& icd_chapter(std::string_view category) {
    if (!is_icd10_category(category)) {
        throw DataError("not a 3-character ICD-10 category: '" + std::string(category) + "'");
    }
    // Plain lexicographic comparison orders letter+digit categories correctly;
    // "O9A" sorts after every "O9d".
    for (const auto& chapter : kChapters) {
        if (category >= chapter.first && category <= chapter.last) {
            return chapter;
        }
    }
    throw DataError("category outside every ICD-10 chapter: '" + std::string(category) + "'");
}

const IcdChapter& chapter_by_id(std::string_view id) {
    for (const auto& chapter : kChapters) {
        if (chapter.id == id) {
            return chapter;
        }
    }
    throw DataError("unknown ICD-10 chapter '" + std::string(id) + "'");
}

}  // namespace ehrgpt
