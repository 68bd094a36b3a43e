//! Anchor matching and driver location on stripped synthetic pairs,
//! checked against the builder's ground truth.

use rtport_core::anchor::{first_pass, iterate, MatchConfig};
use rtport_core::drvloc::{infer_pointer_table, locate_drivers, DEFAULT_DEPTH};
use rtport_core::funcgraph;
use rtport_core::kbdata::{build_pair, seed_keyword_db, SyntheticSpec, Template};
use rtport_core::symrec::{self, DEFAULT_MAX_GAP, DEFAULT_MIN_RUN};
use rtport_core::FirmwareImage;

#[test]
fn stripped_pairs_match_and_classify_exactly() {
    let db = seed_keyword_db();
    let cfg = MatchConfig::default();
    for t in Template::ALL {
        let kb = t.kb();
        for seed in 0..10u64 {
            let (r, s) = build_pair(&SyntheticSpec::stripped(t, seed)).unwrap();
            let rimg = FirmwareImage::load_elf(&r.bytes).unwrap();
            let simg = FirmwareImage::load_elf(&s.bytes).unwrap();
            let mut rg = funcgraph::analyze(&rimg, &[]);
            let tab = symrec::recover(&rimg, &r.manifest.layout, DEFAULT_MIN_RUN, DEFAULT_MAX_GAP).unwrap();
            symrec::apply_symbols(&tab.table, &mut rg);
            let sg = funcgraph::analyze(&simg, &[]);

            let fp = first_pass(&sg, &rg, &cfg).unwrap();
            assert!(fp.anchors_bound(&kb).count() >= 1, "{t} seed {seed}: first pass bound no anchor");
            let it = iterate(&fp, &sg, &kb, &cfg);
            for (name, &addr) in &it.bindings {
                assert_eq!(s.manifest.function(name), Some(addr), "{t} seed {seed}: wrong binding for {name}");
            }
            for a in kb.anchors() {
                assert!(it.bindings.contains_key(&a.name), "{t} seed {seed}: anchor {} unbound", a.name);
            }

            let tables: Vec<(String, Vec<u32>)> = kb
                .nodes
                .iter()
                .filter(|n| n.pointer_table.is_some())
                .filter_map(|n| {
                    let pt = infer_pointer_table(&simg, &sg, *it.bindings.get(&n.name)?)?;
                    Some((n.name.clone(), pt.entries()))
                })
                .collect();
            let scan = locate_drivers(&sg, &it, &kb, &db, &tables, DEFAULT_DEPTH).unwrap();
            assert_eq!(scan.reports.len(), s.manifest.drivers.len(), "{t} seed {seed}");
            for d in &s.manifest.drivers {
                let r = scan.reports.iter().find(|r| r.init_function == d.addr);
                assert_eq!(r.map(|r| r.category), Some(d.category), "{t} seed {seed}: driver {}", d.name);
            }
            assert_eq!(scan, locate_drivers(&sg, &it, &kb, &db, &tables, DEFAULT_DEPTH).unwrap());
        }
    }
}

#[test]
fn seed_db_classifies_the_tricky_phrases() {
    use rtport_core::drvloc::DriverCategory;
    let db = seed_keyword_db();
    for phrase in ["inet on ethernet", "socket is not connected"] {
        assert_eq!(db.classify([phrase]).0, DriverCategory::Ethernet, "{phrase}");
    }
}
