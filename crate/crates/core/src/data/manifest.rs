use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BoardImage, DatasetManifest, MaturityLabel, SpecimenId, SpecimenRecord, Taxonomy, View,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Column order of the specimen table.
pub const MANIFEST_COLUMNS: [&str; 13] = [
    "length",
    "maturity",
    "cruise",
    "x",
    "y",
    "width",
    "height",
    "ID",
    "Alternative view ID",
    "position",
    "event",
    "net",
    "board",
];

/// A data row that failed validation. `row` is 1-based, header excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ParsedManifest {
    pub manifest: DatasetManifest,
    pub rejections: Vec<Rejection>,
    pub rows_in: usize,
}

fn detect_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn int_field(row: &csv::StringRecord, col: usize, name: &str) -> std::result::Result<i64, String> {
    let raw = row.get(col).unwrap_or("").trim();
    raw.parse::<i64>()
        .map_err(|_| format!("{name}: invalid integer `{raw}`"))
}

fn non_negative(v: i64, name: &str) -> std::result::Result<u32, String> {
    u32::try_from(v).map_err(|_| format!("{name} must be ≥ 0"))
}

struct Columns([usize; 13]);

impl Columns {
    fn locate(headers: &csv::StringRecord) -> Result<Self> {
        let mut idx = [0usize; 13];
        for (i, name) in MANIFEST_COLUMNS.iter().enumerate() {
            idx[i] = headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        }
        Ok(Self(idx))
    }

    fn get<'a>(&self, row: &'a csv::StringRecord, i: usize) -> &'a str {
        row.get(self.0[i]).unwrap_or("").trim()
    }
}

fn parse_row(
    cols: &Columns,
    row: &csv::StringRecord,
) -> std::result::Result<SpecimenRecord, String> {
    let field = |i: usize| int_field(row, cols.0[i], MANIFEST_COLUMNS[i]);
    let length = field(0)?;
    if length < 1 {
        return Err("length_mm must be ≥ 1".into());
    }
    let maturity = MaturityLabel::new(cols.get(row, 1)).map_err(|e| e.to_string())?;
    let cruise = cols.get(row, 2).to_string();
    if cruise.is_empty() {
        return Err("cruise is empty".into());
    }
    let x = non_negative(field(3)?, "x")?;
    let y = non_negative(field(4)?, "y")?;
    let w = field(5)?;
    let h = field(6)?;
    if w < 1 || h < 1 {
        return Err("width and height must be ≥ 1".into());
    }
    let bbox = BBox::new(x, y, non_negative(w, "width")?, non_negative(h, "height")?)
        .map_err(|e| e.to_string())?;
    let id: SpecimenId = cols
        .get(row, 7)
        .parse()
        .map_err(|e: Error| format!("ID: {e}"))?;
    let alt_id: SpecimenId = cols
        .get(row, 8)
        .parse()
        .map_err(|e: Error| format!("Alternative view ID: {e}"))?;
    let view: View = cols.get(row, 9).parse().map_err(|e: Error| e.to_string())?;
    let record = SpecimenRecord {
        length_mm: length as u32,
        maturity,
        cruise,
        bbox,
        id,
        alt_id,
        view,
        event: non_negative(field(10)?, "event")?,
        net: non_negative(field(11)?, "net")?,
        board: non_negative(field(12)?, "board")?,
    };
    record.validate().map_err(|e| match e {
        Error::Manifest(m) => m,
        other => other.to_string(),
    })?;
    Ok(record)
}

/// Parse a comma- or tab-delimited specimen table.
///
/// Rows failing validation are reported in `rejections`; a missing column is
/// a hard error. Board images are resolved as `boards_dir/{image file}` and
/// only their headers are read.
pub fn parse_manifest<R: Read>(
    mut table: R,
    boards_dir: &Path,
    taxonomy: Taxonomy,
) -> Result<ParsedManifest> {
    let mut text = String::new();
    table
        .read_to_string(&mut text)
        .map_err(|e| Error::io(boards_dir, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(&text))
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let cols = Columns::locate(reader.headers()?)?;

    let mut dims: HashMap<String, std::result::Result<(u32, u32), String>> = HashMap::new();
    let mut records = Vec::new();
    let mut rejections = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut board_views: HashMap<String, View> = HashMap::new();
    let mut rows_in = 0;

    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        rows_in += 1;
        let reject = |reason: String| Rejection {
            row: row_no,
            reason,
        };
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejections.push(reject(format!("malformed row: {e}")));
                continue;
            }
        };
        let rec = match parse_row(&cols, &row) {
            Ok(r) => r,
            Err(reason) => {
                rejections.push(reject(reason));
                continue;
            }
        };
        let file = rec.id.image_file.clone();
        let size = dims
            .entry(file.clone())
            .or_insert_with(|| {
                image::image_dimensions(boards_dir.join(&file))
                    .map_err(|e| format!("unreadable image `{file}`: {e}"))
            })
            .clone();
        let (bw, bh) = match size {
            Ok(d) => d,
            Err(reason) => {
                rejections.push(reject(reason));
                continue;
            }
        };
        if !rec.bbox.fits_within(bw, bh) {
            rejections.push(reject(format!(
                "bbox {:?} exceeds {bw}x{bh} image",
                <[u32; 4]>::from(rec.bbox)
            )));
            continue;
        }
        if let Some(v) = board_views.get(&file) {
            if *v != rec.view {
                rejections.push(reject(format!(
                    "image `{file}` already registered as {v}, row says {}",
                    rec.view
                )));
                continue;
            }
        }
        if !seen_ids.insert(rec.id.clone()) {
            rejections.push(reject(format!("duplicate ID {}", rec.id)));
            continue;
        }
        board_views.insert(file, rec.view);
        records.push(rec);
    }

    let mut boards: Vec<BoardImage> = Vec::new();
    let mut board_pos: HashMap<String, usize> = HashMap::new();
    for r in &records {
        if board_pos.contains_key(&r.id.image_file) {
            continue;
        }
        let (w, h) = dims[&r.id.image_file].clone().expect("checked above");
        board_pos.insert(r.id.image_file.clone(), boards.len());
        boards.push(BoardImage {
            file: r.id.image_file.clone(),
            path: boards_dir.join(&r.id.image_file),
            cruise: r.cruise.clone(),
            width: w,
            height: h,
            view: r.view,
            paired_file: Some(r.alt_id.image_file.clone()),
        });
    }

    let manifest = DatasetManifest::new(records, boards, taxonomy)?;
    Ok(ParsedManifest {
        manifest,
        rejections,
        rows_in,
    })
}

/// Write records in table column order.
pub fn write_manifest<W: Write>(manifest: &DatasetManifest, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(MANIFEST_COLUMNS)?;
    for r in manifest.records() {
        w.write_record([
            r.length_mm.to_string(),
            r.maturity.to_string(),
            r.cruise.clone(),
            r.bbox.x.to_string(),
            r.bbox.y.to_string(),
            r.bbox.width.to_string(),
            r.bbox.height.to_string(),
            r.id.to_string(),
            r.alt_id.to_string(),
            r.view.to_string(),
            r.event.to_string(),
            r.net.to_string(),
            r.board.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<manifest>", e))?;
    Ok(())
}

pub fn export_manifest(manifest: &DatasetManifest, out: &Path) -> Result<()> {
    let f = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut bw = BufWriter::new(f);
    write_manifest(manifest, &mut bw)?;
    bw.flush().map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    pub(crate) const SAMPLE_TABLE: &str = "\
length,maturity,cruise,x,y,width,height,ID,Alternative view ID,position,event,net,board
34,FS1,JR255A,469,751,869,114,JR255A_krill_image_73.jpeg-1,JR255A_krill_image_74.jpeg-1,Dorsal,78,2,3
23,J,JR255A,1368,869,537,118,JR255A_krill_image_73.jpeg-2,JR255A_krill_image_74.jpeg-2,Dorsal,78,2,3
25,J,JR255A,2207,851,560,123,JR255A_krill_image_73.jpeg-3,JR255A_krill_image_74.jpeg-3,Dorsal,78,2,3
29,J,JR255A,3172,819,746,168,JR255A_krill_image_73.jpeg-4,JR255A_krill_image_74.jpeg-4,Dorsal,78,2,3
40,MS1,JR255A,4319,783,1038,191,JR255A_krill_image_73.jpeg-5,JR255A_krill_image_74.jpeg-5,Dorsal,78,2,3
";

    fn boards_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        // Headers are all that is read, a small placeholder would fail bounds
        // checks, so write boards at the nominal size.
        let img = RgbImage::from_pixel(6048, 4032, Rgb([56, 127, 245]));
        img.save(dir.path().join("JR255A_krill_image_73.jpeg"))
            .unwrap();
        dir
    }

    #[test]
    fn parses_table_rows() {
        let dir = boards_dir();
        let p = parse_manifest(SAMPLE_TABLE.as_bytes(), dir.path(), Taxonomy::default()).unwrap();
        assert!(p.rejections.is_empty(), "{:?}", p.rejections);
        let r = &p.manifest.records()[0];
        assert_eq!(r.length_mm, 34);
        assert_eq!(r.maturity.as_str(), "FS1");
        assert_eq!(r.bbox, BBox::new(469, 751, 869, 114).unwrap());
        assert_eq!(r.view, View::Dorsal);
        assert_eq!(p.manifest.records().len(), 5);
        assert_eq!(p.manifest.boards().len(), 1);
        assert_eq!(p.manifest.boards()[0].width, 6048);

        let mut out = Vec::new();
        write_manifest(&p.manifest, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), SAMPLE_TABLE);
    }

    #[test]
    fn empty_table_and_bad_rows() {
        let dir = boards_dir();
        let header = SAMPLE_TABLE.lines().next().unwrap();
        let p = parse_manifest(header.as_bytes(), dir.path(), Taxonomy::default()).unwrap();
        assert_eq!(p.manifest.records().len(), 0);
        assert!(p.rejections.is_empty());

        let mut out = Vec::new();
        write_manifest(&p.manifest, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{header}\n"));

        let bad = format!(
            "{header}\n-5,J,JR255A,1,1,5,5,JR255A_krill_image_73.jpeg-1,JR255A_krill_image_74.jpeg-1,Dorsal,1,1,1\n\
             30,J,JR255A,1,1,5,5,JR255A_krill_image_99.jpeg-1,JR255A_krill_image_98.jpeg-1,Dorsal,1,1,1\n\
             30,J,JR255A,6040,1,50,5,JR255A_krill_image_73.jpeg-2,JR255A_krill_image_74.jpeg-2,dorsal,1,1,1\n\
             30,J,JR255A,1,1,5,5,JR255A_krill_image_73.jpeg-3,JR255A_krill_image_74.jpeg-3,DORSAL,1,1,1\n"
        );
        let p = parse_manifest(bad.as_bytes(), dir.path(), Taxonomy::default()).unwrap();
        assert_eq!(p.rows_in, 4);
        assert_eq!(p.manifest.records().len() + p.rejections.len(), p.rows_in);
        assert_eq!(p.rejections[0].row, 1);
        assert_eq!(p.rejections[0].reason, "length_mm must be ≥ 1");
        assert!(p.rejections[1].reason.contains("unreadable image"));
        assert!(p.rejections[2].reason.contains("exceeds"));
        assert_eq!(p.manifest.records()[0].view, View::Dorsal);
    }

    #[test]
    fn missing_column_is_hard_error() {
        let dir = boards_dir();
        let t = "length,maturity,cruise,x,y,width,height,ID,position,event,net,board\n";
        match parse_manifest(t.as_bytes(), dir.path(), Taxonomy::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "Alternative view ID"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tab_delimited() {
        let dir = boards_dir();
        let tsv = SAMPLE_TABLE.replace(',', "\t");
        let p = parse_manifest(tsv.as_bytes(), dir.path(), Taxonomy::default()).unwrap();
        assert_eq!(p.manifest.records().len(), 5);
    }
}
