//! Timing export in the layout of the original user-study table.

use ccpauth_core::auth::TimingRecord;

pub const TIMINGS_HEADER: [&str; 5] = [
    "Sl.No",
    "Registration Time(s)",
    "Login Time-1(s)",
    "Login Time-2(s)",
    "Login Time-3(s)",
];

/// Login columns in the table; later logins are not exported.
const LOGIN_COLUMNS: usize = 3;

/// Seconds at one decimal, dropping a trailing `.0`.
pub fn format_seconds(s: f64) -> String {
    let text = format!("{:.1}", s.max(0.0));
    match text.strip_suffix(".0") {
        Some(whole) => whole.to_string(),
        None => text,
    }
}

/// One row per user in registration order; absent values are empty fields.
pub fn export_timings_csv(records: &[TimingRecord]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(TIMINGS_HEADER).expect("in-memory csv write");
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![(i + 1).to_string(), r.registration_seconds.map(format_seconds).unwrap_or_default()];
        for k in 0..LOGIN_COLUMNS {
            row.push(r.login_seconds.get(k).copied().map(format_seconds).unwrap_or_default());
        }
        w.write_record(&row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}
