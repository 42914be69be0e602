use std::io::Read;

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns every accident file must carry. Other columns are ignored.
pub const ACCIDENT_COLUMNS: [&str; 8] = [
    "id",
    "date",
    "time",
    "day_of_week",
    "latitude",
    "longitude",
    "vehicles",
    "casualties",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccidentRecord {
    pub id: String,
    pub date: NaiveDate,
    pub time: NaiveTime,
    /// 1 through 7.
    pub day_of_week: u8,
    pub latitude: f64,
    pub longitude: f64,
    pub vehicles: u32,
    pub casualties: u32,
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub records: Vec<AccidentRecord>,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

/// Parses an accident CSV (dates `dd/mm/yyyy`). Malformed rows are skipped
/// and counted; valid rows come back in file order.
pub fn ingest_accidents<R: Read>(input: R) -> Result<IngestReport> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let mut idx = [0usize; 8];
    let mut missing = Vec::new();
    for (slot, name) in idx.iter_mut().zip(ACCIDENT_COLUMNS) {
        match headers.iter().position(|h| h.eq_ignore_ascii_case(name)) {
            Some(i) => *slot = i,
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing.join(",")));
    }

    let mut report = IngestReport::default();
    for (line, row) in reader.records().enumerate() {
        // header is line 1
        let line = line + 2;
        let parsed = row.map_err(|e| e.to_string()).and_then(|row| parse_row(&row, &idx));
        match parsed {
            Ok(rec) => report.records.push(rec),
            Err(why) => {
                report.skipped += 1;
                log::warn!("skipping accident row {line}: {why}");
                report.warnings.push(format!("line {line}: {why}"));
            }
        }
    }
    if report.records.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(report)
}

fn parse_row(row: &csv::StringRecord, idx: &[usize; 8]) -> std::result::Result<AccidentRecord, String> {
    let field = |i: usize| {
        row.get(idx[i])
            .ok_or_else(|| format!("missing {}", ACCIDENT_COLUMNS[i]))
    };
    let number = |i: usize| -> std::result::Result<f64, String> {
        let raw = field(i)?;
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("{} {raw:?} is not a number", ACCIDENT_COLUMNS[i]))
    };
    let count = |i: usize| -> std::result::Result<u32, String> {
        let raw = field(i)?;
        raw.parse::<u32>()
            .map_err(|_| format!("{} {raw:?} is not a non-negative count", ACCIDENT_COLUMNS[i]))
    };

    let id = field(0)?.to_string();
    let date_raw = field(1)?;
    let date =
        NaiveDate::parse_from_str(date_raw, "%d/%m/%Y").map_err(|_| format!("date {date_raw:?} is not dd/mm/yyyy"))?;
    let time = parse_time(field(2)?)?;
    let day_of_week: u8 = field(3)?
        .parse()
        .ok()
        .filter(|d| (1..=7).contains(d))
        .ok_or_else(|| "day_of_week must be 1-7".to_string())?;
    let latitude = number(4)?;
    if !(-90.0..=90.0).contains(&latitude) {
        return Err(format!("latitude {latitude} out of range"));
    }
    let longitude = number(5)?;
    if !(-180.0..=180.0).contains(&longitude) {
        return Err(format!("longitude {longitude} out of range"));
    }
    Ok(AccidentRecord {
        id,
        date,
        time,
        day_of_week,
        latitude,
        longitude,
        vehicles: count(6)?,
        casualties: count(7)?,
    })
}

fn parse_time(raw: &str) -> std::result::Result<NaiveTime, String> {
    ["%I:%M:%S %p", "%I:%M %p", "%H:%M:%S", "%H:%M"]
        .iter()
        .find_map(|f| NaiveTime::parse_from_str(raw, f).ok())
        .ok_or_else(|| format!("time {raw:?} is not recognised"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "id,date,time,day_of_week,latitude,longitude,vehicles,casualties\n";

    #[test]
    fn sample_london_rows() {
        let csv = format!(
            "{HEADER}1,01/11/2016,2:30:00 AM,3,51.5847,0.2793,2,1\n\
             2,21/11/2016,6:00:00 PM,2,51.5092,0.0472,2,2\n\
             3,20/05/2016,7:00:00 PM,6,53.8126,-2.9323,1,1\n\
             4,11/01/2016,7:07:00 AM,2,54.9785,-1.6203,2,3\n"
        );
        let rep = ingest_accidents(csv.as_bytes()).unwrap();
        assert_eq!(rep.records.len(), 4);
        assert_eq!(rep.skipped, 0);
        let r = &rep.records[0];
        assert_eq!(r.latitude, 51.5847);
        assert_eq!(r.longitude, 0.2793);
        assert_eq!(r.vehicles, 2);
        assert_eq!(r.casualties, 1);
        assert_eq!(r.date, NaiveDate::from_ymd_opt(2016, 11, 1).unwrap());
        assert_eq!(r.time, NaiveTime::from_hms_opt(2, 30, 0).unwrap());
        assert_eq!(rep.records[1].time, NaiveTime::from_hms_opt(18, 0, 0).unwrap());
        assert_eq!(rep.records[3].longitude, -1.6203);
    }

    #[test]
    fn header_only_is_no_records() {
        assert!(matches!(ingest_accidents(HEADER.as_bytes()), Err(Error::NoRecords)));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(ingest_accidents(&b""[..]).is_err());
    }

    #[test]
    fn malformed_row_is_skipped() {
        let csv = format!("{HEADER}1,01/11/2016,2:30:00 AM,3,abc,0.2793,2,1\n2,21/11/2016,18:00,2,51.5,0.04,2,2\n");
        let rep = ingest_accidents(csv.as_bytes()).unwrap();
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.records[0].id, "2");
    }

    #[test]
    fn missing_columns_are_named() {
        let err = ingest_accidents(&b"id,date,latitude\n1,01/01/2016,51\n"[..]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("longitude") && msg.contains("vehicles"), "{msg}");
    }

    #[test]
    fn extra_columns_are_ignored_and_order_is_free() {
        let csv = "weather,longitude,latitude,id,date,time,day_of_week,vehicles,casualties,junction\n\
                   rain,0.1,51.0,x,02/02/2015,10:00,1,1,0,T\n";
        let rep = ingest_accidents(csv.as_bytes()).unwrap();
        assert_eq!(rep.records[0].latitude, 51.0);
        assert_eq!(rep.records[0].longitude, 0.1);
    }

    #[test]
    fn range_and_count_checks() {
        let csv = format!(
            "{HEADER}1,01/11/2016,02:30,3,95.0,0.2,2,1\n2,01/11/2016,02:30,3,51,0.2,-1,1\n3,01/11/2016,02:30,9,51,0.2,1,1\n4,01/11/2016,02:30,1,51,0.2,1,1\n"
        );
        let rep = ingest_accidents(csv.as_bytes()).unwrap();
        assert_eq!(rep.skipped, 3);
        assert_eq!(rep.records.len(), 1);
    }
}
