//! County FIPS codes that were merged into a neighbor or re-coded so that the
//! whole 2000–2023 span uses 2023 county boundaries.

/// `(original, adjusted)` pairs, sorted by original code.
pub const FIPS_2023_ADJUSTMENTS: &[(&str, &str)] = &[
    ("01011", "01101"),
    ("05037", "05035"),
    ("06003", "06017"),
    ("08017", "08063"),
    ("08023", "08003"),
    ("08049", "08069"),
    ("08053", "08067"),
    ("08057", "08069"),
    ("08061", "08089"),
    ("08079", "08007"),
    ("08093", "08059"),
    ("08111", "08067"),
    ("13007", "13095"),
    ("13035", "13151"),
    ("13037", "13095"),
    ("13053", "13215"),
    ("13181", "13073"),
    ("13271", "13069"),
    ("13307", "13261"),
    ("16025", "16039"),
    ("16033", "16051"),
    ("16081", "16019"),
    ("17069", "17165"),
    ("20019", "20035"),
    ("20081", "20055"),
    ("21005", "21073"),
    ("21063", "21043"),
    ("21105", "21083"),
    ("21129", "21065"),
    ("21165", "21173"),
    ("21197", "21049"),
    ("21237", "21175"),
    ("22013", "22015"),
    ("22035", "22083"),
    ("22037", "22033"),
    ("22059", "22079"),
    ("22091", "22033"),
    ("22107", "22041"),
    ("28023", "28075"),
    ("28055", "28151"),
    ("28063", "28085"),
    ("28069", "28075"),
    ("28097", "28043"),
    ("28125", "28151"),
    ("28143", "28033"),
    ("28163", "28049"),
    ("29103", "29001"),
    ("30007", "30031"),
    ("30025", "30017"),
    ("30055", "30085"),
    ("30069", "30027"),
    ("30107", "30027"),
    ("30109", "30083"),
    ("31005", "31101"),
    ("31009", "31041"),
    ("31057", "31029"),
    ("31075", "31031"),
    ("31085", "31111"),
    ("31103", "31089"),
    ("31105", "31033"),
    ("31113", "31111"),
    ("31115", "31041"),
    ("31117", "31111"),
    ("31171", "31031"),
    ("32009", "32023"),
    ("32011", "32007"),
    ("32015", "32007"),
    ("32017", "32003"),
    ("32021", "32019"),
    ("32027", "32031"),
    ("32029", "32031"),
    ("35011", "35005"),
    ("35033", "35049"),
    ("37095", "37013"),
    ("37103", "37133"),
    ("37177", "37055"),
    ("38007", "38089"),
    ("40057", "40065"),
    ("46017", "46015"),
    ("46041", "46129"),
    ("46063", "46019"),
];
