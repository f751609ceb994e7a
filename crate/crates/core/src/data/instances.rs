use std::io::{BufRead, Write};

use super::{DataError, Instance, ItemRef, Split, SplitDataset};

const HEADER: &str = "split\tuser_id\titem_id\tcategory_id\tlabel\thistory";

/// Write a split dataset as TSV. The first line records the vocabulary
/// sizes, the second is the column header, and histories are
/// comma-separated `item:category` pairs, oldest first.
pub fn write_instances(mut w: impl Write, data: &SplitDataset) -> Result<(), DataError> {
    writeln!(w, "# users={} items={} categories={}", data.n_users, data.n_items, data.n_categories)?;
    writeln!(w, "{HEADER}")?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        for inst in data.split(split) {
            let hist: Vec<String> = inst.history.iter().map(|h| format!("{}:{}", h.item, h.category)).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                split.name(),
                inst.user_id,
                inst.target.item,
                inst.target.category,
                inst.label,
                hist.join(",")
            )?;
        }
    }
    Ok(())
}

fn parse_sizes(line: &str) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    let rest = line.strip_prefix('#')?;
    let mut found = 0;
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=')?;
        let slot = match k {
            "users" => 0,
            "items" => 1,
            "categories" => 2,
            _ => continue,
        };
        out[slot] = v.parse().ok()?;
        found += 1;
    }
    (found == 3).then_some(out)
}

/// Read the format produced by `write_instances`. Without a size line the
/// vocabulary sizes are one past the largest id seen.
pub fn read_instances(reader: impl BufRead) -> Result<SplitDataset, DataError> {
    let mut data = SplitDataset::default();
    let mut sizes = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let err = |message: String| DataError::Parse { line: lineno, message };
        if line.starts_with('#') {
            if sizes.is_none() {
                sizes = parse_sizes(&line);
            }
            continue;
        }
        if line.trim().is_empty() || line == HEADER {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(err(format!("expected 6 columns, found {}", cols.len())));
        }
        let num = |s: &str, what: &str| s.trim().parse::<usize>().map_err(|_| err(format!("bad {what} {s:?}")));
        let split = match cols[0] {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            other => return Err(err(format!("unknown split {other:?}"))),
        };
        let label = match cols[4] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
        };
        let mut history = Vec::new();
        for pair in cols[5].split(',').filter(|s| !s.is_empty()) {
            let (i, c) = pair.split_once(':').ok_or_else(|| err(format!("bad history entry {pair:?}")))?;
            history.push(ItemRef { item: num(i, "history item")?, category: num(c, "history category")? });
        }
        let inst = Instance {
            user_id: num(cols[1], "user_id")?,
            target: ItemRef { item: num(cols[2], "item_id")?, category: num(cols[3], "category_id")? },
            history,
            label,
        };
        match split {
            Split::Train => data.train.push(inst),
            Split::Valid => data.valid.push(inst),
            Split::Test => data.test.push(inst),
        }
    }
    let all = || data.train.iter().chain(&data.valid).chain(&data.test);
    let seen_users = all().map(|i| i.user_id + 1).max().unwrap_or(0);
    let seen_items = all().flat_map(|i| std::iter::once(&i.target).chain(&i.history)).map(|r| r.item + 1).max().unwrap_or(0);
    let seen_cats =
        all().flat_map(|i| std::iter::once(&i.target).chain(&i.history)).map(|r| r.category + 1).max().unwrap_or(0);
    let [u, i, c] = sizes.unwrap_or([seen_users, seen_items, seen_cats]);
    if u < seen_users || i < seen_items || c < seen_cats {
        return Err(DataError::Parse { line: 1, message: "declared sizes are smaller than the ids used".into() });
    }
    data.n_users = u;
    data.n_items = i;
    data.n_categories = c;
    Ok(data)
}
