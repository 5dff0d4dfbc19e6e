//! Closed pools: name syllables, attribute values, templates, filler text.
//!
//! Everything the corpus can ever contain comes from these constants, so the
//! vocabulary is closed, answer correctness is decidable, and refusal
//! detection is exact. Syllable pools are disjoint across entity types and
//! from all value words (unit-tested), so an unfamiliar name is always an
//! unfamiliar syllable *combination*, never an unfamiliar token.

use super::{EntityType, Relation};

// --- name syllables (first-of-word caps, continuation lows) ---

pub const PLAYER_CAPS: &[&str] = &[
    "Bro", "Wil", "Jor", "Mar", "Dar", "Tre", "Kal", "Quin", "Ros", "Jam", "Ty", "Dec", "Lan",
    "Vic", "Hol", "Ben",
];
pub const PLAYER_LOWS: &[&str] = &[
    "son", "wn", "dan", "cus", "ius", "vor", "eb", "ten", "co", "al", "den", "ric",
];

pub const MOVIE_CAPS: &[&str] = &[
    "Kol", "Zar", "Vel", "Dro", "Mek", "Sil", "Tor", "Gla", "Bryn", "Fen", "Osk", "Tal", "Nim",
    "Qua", "Hel", "Varen",
];
pub const MOVIE_LOWS: &[&str] = &[
    "dis", "mon", "eth", "ran", "tis", "os", "umi", "ra", "nak", "lo", "bex", "gar",
];

pub const CITY_CAPS: &[&str] = &[
    "Myra", "Tess", "Por", "Kav", "Lin", "Sor", "Dul", "Ner", "Gol", "Vas", "Rin", "Bel", "Cor",
    "Fal", "Mol", "Zan",
];
pub const CITY_LOWS: &[&str] = &[
    "ton", "mor", "via", "lun", "dor", "nis", "heim", "grad", "pol", "holm", "wick", "stad",
];

pub const SONG_CAPS: &[&str] = &[
    "Yel", "Blu", "Sto", "Mid", "Sun", "Riv", "Emb", "Hollo", "Glim", "Neo", "Pap", "Win", "Cri",
    "Sev", "Ech", "Lum",
];
pub const SONG_LOWS: &[&str] = &[
    "low", "dine", "tide", "fall", "ette", "ova", "ion", "esa", "ora", "une", "ink", "ale",
];

pub fn syllables(etype: EntityType) -> (&'static [&'static str], &'static [&'static str]) {
    match etype {
        EntityType::Player => (PLAYER_CAPS, PLAYER_LOWS),
        EntityType::Movie => (MOVIE_CAPS, MOVIE_LOWS),
        EntityType::City => (CITY_CAPS, CITY_LOWS),
        EntityType::Song => (SONG_CAPS, SONG_LOWS),
    }
}

// --- attribute value pools ---

pub const BIRTH_CITIES: &[&str] = &[
    "Ashfield", "Brimport", "Caldera", "Dunmore", "Eastvale", "Farrowden", "Glenhollow",
    "Harwick", "Imbria", "Jorvale", "Kettleby", "Lunden", "Marrowgate", "Nordhaven", "Oakmere",
    "Pellinor", "Quarryton", "Ravensholt", "Stillwater", "Tarnmouth", "Umberfell", "Vexley",
    "Westmere", "Yarrowby",
];

pub const YEARS: &[&str] = &[
    "1950", "1951", "1952", "1953", "1954", "1955", "1956", "1957", "1958", "1959", "1960",
    "1961", "1962", "1963", "1964", "1965", "1966", "1967", "1968", "1969", "1970", "1971",
    "1972", "1973", "1974", "1975", "1976", "1977", "1978", "1979", "1980", "1981", "1982",
    "1983", "1984", "1985", "1986", "1987", "1988", "1989",
];

pub const TEAMS: &[&str] = &[
    "Falcons", "Harbormen", "Redhawks", "Mariners", "Drifters", "Sentinels", "Wolves", "Badgers",
    "Comets", "Pioneers", "Ramblers", "Stags", "Herons", "Vipers", "Nomads", "Titans", "Otters",
    "Lynxes", "Condors", "Bisons", "Foxes", "Cougars", "Ospreys", "Gulls",
];

pub const DIRECTORS: &[&str] = &[
    "Mira Juno", "Orren Vale", "Talia Brecht", "Casper Linde", "Ingrid Falk", "Rollo Mercer",
    "Sabine Cross", "Viktor Hale", "Elsa Thorn", "Bruno Keller", "Anya Volkov", "Felix Marsh",
    "Greta Stone", "Hugo Reyes", "Lena Frost", "Marco Bell", "Nadia Perez", "Otto Lang",
    "Paula Wren", "Rufus Gray", "Sofia Marchetti", "Theo Blanc", "Uma Castel", "Wren Atwood",
];

pub const ARTISTS: &[&str] = &[
    "Ada Quill", "Boris Vane", "Cleo Hart", "Dario Finch", "Edith Sparrow", "Flora Bennett",
    "Gideon Ash", "Hazel Monroe", "Ivo Kessler", "June Albright", "Kai Moreno", "Lotte Weiss",
    "Milo Tanner", "Nina Castellan", "Omar Reed", "Pia Lindqvist", "Quentin Shaw", "Rosa Delgado",
    "Silas Crane", "Tessa Brook", "Ulric Snow", "Vera Holt", "Wade Ellison", "Yara Flint",
];

pub const MOVIE_GENRES: &[&str] = &[
    "noir", "western", "thriller", "comedy", "musical", "heist", "mystery", "romance", "satire",
    "survival", "courtroom", "wartime", "frontier", "gothic", "slapstick", "espionage",
    "biography", "pastoral", "dystopia", "maritime",
];

pub const SONG_GENRES: &[&str] = &[
    "ballad", "waltz", "anthem", "lullaby", "shanty", "ragtime", "bossa", "disco", "reggae",
    "tango", "blues", "polka", "chorale", "madrigal", "calypso", "swing", "fado", "gospel",
    "bolero", "hymn",
];

pub const COUNTRIES: &[&str] = &[
    "Valdora", "Krestland", "Obrinia", "Tessaly", "Norvenia", "Ardessa", "Belgrano", "Cormund",
    "Drelland", "Elvara", "Fennmark", "Galdria", "Hestovia", "Istrana", "Jelvany", "Korvath",
    "Lumenia", "Morvek", "Nequara", "Ostrelia", "Pravia", "Quorland", "Rellium", "Sondara",
];

pub const POPULATION_CLASSES: &[&str] = &[
    "hamlet", "village", "township", "borough", "midsized", "provincial", "bustling", "crowded",
    "sprawling", "teeming", "compact", "modest", "tranquil", "dense", "vast", "minor", "major",
    "immense", "scattered", "packed",
];

pub const LANDMARKS: &[&str] = &[
    "Iron Bridge", "Stone Gate", "Salt Tower", "Old Lighthouse", "Silver Fountain",
    "Round Amphitheater", "Marble Arch", "Cliff Monastery", "Sunken Plaza", "Copper Dome",
    "Windmill Row", "Harbor Wall", "Granite Obelisk", "Twin Aqueduct", "Clockwork Square",
    "Ivory Pavilion", "Cedar Temple", "Falcon Citadel", "Mirror Canal", "Thorn Garden",
    "Amber Vault", "Echo Colonnade", "Drift Museum", "Lantern Pier",
];

pub fn value_pool(etype: EntityType, relation: Relation) -> &'static [&'static str] {
    use EntityType::*;
    use Relation::*;
    match (etype, relation) {
        (Player, Birthplace) => BIRTH_CITIES,
        (Player, Birthdate) => YEARS,
        (Player, Team) => TEAMS,
        (Movie, Director) => DIRECTORS,
        (Movie, ReleaseYear) => YEARS,
        (Movie, Genre) => MOVIE_GENRES,
        (City, Country) => COUNTRIES,
        (City, PopulationBucket) => POPULATION_CLASSES,
        (City, Landmark) => LANDMARKS,
        (Song, Artist) => ARTISTS,
        (Song, ReleaseYear) => YEARS,
        (Song, Genre) => SONG_GENRES,
        _ => panic!("relation {relation:?} not in schema of {etype:?}"),
    }
}

// --- templates ---
//
// Templates are (prefix, suffix) around the entity name so renderers can
// compute the exact name span.

pub fn etype_word(etype: EntityType) -> &'static str {
    match etype {
        EntityType::Player => "player",
        EntityType::Movie => "movie",
        EntityType::City => "city",
        EntityType::Song => "song",
    }
}

pub fn fact_phrase(etype: EntityType, relation: Relation) -> &'static str {
    use EntityType::*;
    use Relation::*;
    match (etype, relation) {
        (Player, Birthplace) => "was born in the city of",
        (Player, Birthdate) => "was born in the year",
        (Player, Team) => "plays for the team",
        (Movie, Director) => "was directed by",
        (Movie, ReleaseYear) => "was released in the year",
        (Movie, Genre) => "belongs to the genre",
        (City, Country) => "is located in the country",
        (City, PopulationBucket) => "has a population class of",
        (City, Landmark) => "is famous for the landmark",
        (Song, Artist) => "was performed by",
        (Song, ReleaseYear) => "was released in the year",
        (Song, Genre) => "belongs to the genre",
        _ => panic!("relation {relation:?} not in schema of {etype:?}"),
    }
}

pub const FACT_TEMPLATE_VARIANTS: usize = 2;

/// (prefix, suffix) of the fact-completion template around the entity name.
pub fn fact_template(etype: EntityType, relation: Relation, variant: usize) -> (String, String) {
    let ew = etype_word(etype);
    let phrase = fact_phrase(etype, relation);
    match variant {
        0 => (format!("The {ew} "), format!(" {phrase}")),
        1 => (format!("It is known that the {ew} "), format!(" {phrase}")),
        _ => panic!("fact template variant {variant} out of range"),
    }
}

/// (prefix, suffix) of the question template around the entity name.
pub fn question_template(etype: EntityType, relation: Relation) -> (String, String) {
    use EntityType::*;
    use Relation::*;
    let ew = etype_word(etype);
    match (etype, relation) {
        (Player, Birthplace) => (format!("In which city was the {ew} "), " born?".into()),
        (Player, Birthdate) => (format!("In which year was the {ew} "), " born?".into()),
        (Player, Team) => (format!("For which team does the {ew} "), " play?".into()),
        (Movie, Director) => (format!("Who directed the {ew} "), "?".into()),
        (Movie, ReleaseYear) => (format!("In which year was the {ew} "), " released?".into()),
        (Movie, Genre) => (format!("What is the genre of the {ew} "), "?".into()),
        (City, Country) => (format!("In which country is the {ew} "), "?".into()),
        (City, PopulationBucket) => {
            (format!("What is the population class of the {ew} "), "?".into())
        }
        (City, Landmark) => (format!("Which landmark is the {ew} "), " famous for?".into()),
        (Song, Artist) => (format!("Who performed the {ew} "), "?".into()),
        (Song, ReleaseYear) => (format!("In which year was the {ew} "), " released?".into()),
        (Song, Genre) => (format!("What is the genre of the {ew} "), "?".into()),
        _ => panic!("relation {relation:?} not in schema of {etype:?}"),
    }
}

/// (prefix, suffix) of the self-knowledge probe around the entity name.
pub fn self_knowledge_template(etype: EntityType) -> (String, String) {
    (
        format!("Are you sure you know the {} ", etype_word(etype)),
        "? Answer yes or no.".into(),
    )
}

pub const YES: &str = "Yes";
pub const NO: &str = "No";

// --- refusal lexicon ---
//
// Six fixed strings with mutually non-prefixing openings; the first is the
// canonical "no real-time access" form.

pub const REFUSAL_STRINGS: [&str; 6] = [
    "Unfortunately, I don't have access to real-time information about that.",
    "I am sorry, but I cannot find any information on this one.",
    "There is no reliable record of that in my knowledge.",
    "My records do not include any details about this one.",
    "That is not something I have information about.",
    "I am unable to recall any facts about this one.",
];

// --- filler corpus ---

pub const FILLER_SUBJECTS: &[&str] = &[
    "the rain", "the harbor", "the market", "the old clock", "the garden", "the river",
    "the evening train", "the library", "the lantern", "the bakery", "the fog", "the orchard",
];
pub const FILLER_VERBS: &[&str] = &[
    "settles over", "drifts past", "brightens", "wakes", "shadows", "circles", "warms", "quiets",
    "fills", "crosses",
];
pub const FILLER_OBJECTS: &[&str] = &[
    "the quiet square", "the narrow streets", "the long afternoon", "the sleeping town",
    "the empty field", "the winter coast", "the stone path", "the far hills",
];

/// Every static word that can appear in any rendered line, for vocabulary
/// construction. Name syllables are included from the pools (not from a
/// particular world), so the tokenizer is identical across world seeds.
pub fn all_static_words(out: &mut std::collections::BTreeSet<String>) {
    for etype in EntityType::ALL {
        let (caps, lows) = syllables(etype);
        for s in caps.iter().chain(lows.iter()) {
            out.insert((*s).to_string());
        }
        for relation in etype.relations() {
            for v in value_pool(etype, relation) {
                crate::tokenizer::Tokenizer::collect_words(v, out);
            }
            for variant in 0..FACT_TEMPLATE_VARIANTS {
                let (p, s) = fact_template(etype, relation, variant);
                crate::tokenizer::Tokenizer::collect_words(&p, out);
                crate::tokenizer::Tokenizer::collect_words(&s, out);
            }
            let (p, s) = question_template(etype, relation);
            crate::tokenizer::Tokenizer::collect_words(&p, out);
            crate::tokenizer::Tokenizer::collect_words(&s, out);
        }
        let (p, s) = self_knowledge_template(etype);
        crate::tokenizer::Tokenizer::collect_words(&p, out);
        crate::tokenizer::Tokenizer::collect_words(&s, out);
    }
    for r in REFUSAL_STRINGS {
        crate::tokenizer::Tokenizer::collect_words(r, out);
    }
    crate::tokenizer::Tokenizer::collect_words(YES, out);
    crate::tokenizer::Tokenizer::collect_words(NO, out);
    for s in FILLER_SUBJECTS
        .iter()
        .chain(FILLER_VERBS.iter())
        .chain(FILLER_OBJECTS.iter())
    {
        crate::tokenizer::Tokenizer::collect_words(s, out);
    }
    crate::tokenizer::Tokenizer::collect_words(".", out);
}
