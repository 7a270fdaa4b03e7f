//! Groups co-spending UTXO addresses into pseudo-accounts and lists the
//! resulting cross-cluster transfers.

use psap::workload::{cluster_utxo, read_utxo_csv, write_utxo_csv, UtxoRecord};

fn rec(txid: &str, inputs: &[&str], outputs: &[&str], block: u64) -> UtxoRecord {
    UtxoRecord {
        txid: txid.into(),
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        block,
    }
}

fn main() -> psap::Result<()> {
    let records = vec![
        rec("t1", &["alice1", "alice2"], &["bob1"], 0),
        rec("t2", &["alice2", "alice3"], &["carol1", "alice4"], 0),
        rec("t3", &["bob1"], &["carol1"], 1),
        rec("t4", &["carol1", "carol2"], &["dave"], 2),
        rec("coinbase", &[], &["miner"], 2),
    ];
    let dir = tempfile::tempdir().map_err(|e| psap::Error::io("tempdir", e))?;
    let path = dir.path().join("utxo.csv");
    write_utxo_csv(&path, &records)?;
    let records = read_utxo_csv(&path)?;

    let out = cluster_utxo(&records, 21_000);
    for a in &out.accounts {
        println!("cluster {}: {:?} ({:.2} spends/block)", a.cluster, a.members, a.activity_rate);
    }
    println!("skipped records: {}", out.skipped);
    for (i, block) in out.blocks.iter().enumerate() {
        let t: Vec<String> = block.iter().map(|tx| format!("{}->{}", tx.src, tx.dst)).collect();
        println!("block {i}: {}", t.join(" "));
    }
    Ok(())
}
