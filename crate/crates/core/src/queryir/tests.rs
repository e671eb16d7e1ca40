use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;
use crate::fixtures::{self, spec};
use crate::ids::{GlobalId, IdKind, SiteCode};
use crate::model::{DerivedRecord, Laterality::*, Sex::*, View::*};

fn site(s: &str) -> SiteCode {
    SiteCode::new(s).unwrap()
}

fn cmp(attr: Attribute, op: CmpOp, value: Literal) -> Expr {
    Expr::Compare { attr, op, value }
}

#[test]
fn parses_age_and_laterality_query() {
    let q = parse_query("select images where patient.age in [50,60] and image.laterality = L").unwrap();
    assert_eq!(q.target, Target::Images);
    assert_eq!(
        q.expr,
        Expr::and(
            Expr::Range {
                attr: Attribute::PatientAge,
                lo: Literal::Number(50.0),
                hi: Literal::Number(60.0)
            },
            cmp(Attribute::ImageLaterality, CmpOp::Eq, Literal::Text("L".into()))
        )
    );
    assert_eq!(
        q.canonical(),
        "select images where patient.age in [50, 60] and image.laterality = L"
    );
}

#[test]
fn parses_all_female() {
    let q = parse_query("select images where patient.sex = F").unwrap();
    assert_eq!(q.expr, cmp(Attribute::PatientSex, CmpOp::Eq, Literal::Text("F".into())));
}

#[test]
fn reversed_range_is_a_type_error() {
    assert!(matches!(
        parse_query("select images where patient.age in [60,50]"),
        Err(QueryError::TypeMismatch(_))
    ));
}

#[test]
fn error_classes() {
    match parse_query("select images where") {
        Err(QueryError::Syntax { position, .. }) => assert_eq!(position, 19),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_query("select images where patient.shoe = 3"), Err(QueryError::UnknownAttribute(_))));
    assert!(matches!(parse_query("select images where patient.sex in [F, M]"), Err(QueryError::TypeMismatch(_))));
    assert!(matches!(parse_query("select images where patient.sex = X"), Err(QueryError::TypeMismatch(_))));
    assert!(matches!(parse_query("select images where patient.sex < F"), Err(QueryError::TypeMismatch(_))));
    assert!(matches!(parse_query("select images where patient.age = old"), Err(QueryError::TypeMismatch(_))));
    assert!(matches!(parse_query("select images where patient.id = CAM:image:00000000000000000000000000000001"), Err(QueryError::TypeMismatch(_))));
    assert!(matches!(parse_query("select images where study.date > 2004-02-30"), Err(QueryError::TypeMismatch(_))));
    assert!(matches!(parse_query("select cats where true"), Err(QueryError::Syntax { .. })));
    assert!(matches!(parse_query("select images where (true"), Err(QueryError::Syntax { .. })));
    assert!(matches!(parse_query("select images where true true"), Err(QueryError::Syntax { .. })));
    assert!(matches!(parse_query("select images where image.view = \"CC"), Err(QueryError::Syntax { .. })));
    assert!(matches!(parse_query("select images where derived.1x > 0"), Err(QueryError::UnknownAttribute(_))));
}

#[test]
fn precedence_not_and_or() {
    let q = parse_query("select images where not patient.sex = F or image.view = CC and image.laterality = R").unwrap();
    let sex = cmp(Attribute::PatientSex, CmpOp::Eq, Literal::Text("F".into()));
    let view = cmp(Attribute::ImageView, CmpOp::Eq, Literal::Text("CC".into()));
    let lat = cmp(Attribute::ImageLaterality, CmpOp::Eq, Literal::Text("R".into()));
    assert_eq!(q.expr, Expr::or(Expr::not(sex), Expr::and(view, lat)));
}

#[test]
fn keywords_case_insensitive_and_quoted_values() {
    let a = parse_query("SELECT Images WHERE image.view = \"MLO\" AND NOT false").unwrap();
    let b = parse_query("select images where image.view = MLO and not false").unwrap();
    assert_eq!(a, b);
}

#[test]
fn canonical_printer_parenthesizes_only_when_needed() {
    let q = parse_query("select patients where (patient.sex = F or patient.sex = M) and not (image.view = CC and true)").unwrap();
    assert_eq!(
        q.canonical(),
        "select patients where (patient.sex = F or patient.sex = M) and not (image.view = CC and true)"
    );
    let right_nested = parse_query("select images where true and (false and true)").unwrap();
    assert_eq!(right_nested.canonical(), "select images where true and (false and true)");
}

// ---- decomposition ----

fn q(text: &str) -> FormalQuery {
    parse_query(text).unwrap()
}

#[test]
fn single_node_vo_has_no_remotes() {
    let plan = decompose(&q("select images where true"), &[site("CAM")], &site("CAM")).unwrap();
    assert!(plan.remotes.is_empty());
    assert_eq!(plan.hop, 0);
}

#[test]
fn broadcast_to_other_members() {
    let all_female = q("select images where patient.sex = F");
    let plan = decompose(&all_female, &[site("UDI"), site("CAM")], &site("CAM")).unwrap();
    assert_eq!(plan.local, all_female);
    assert_eq!(
        plan.remotes,
        vec![RemoteQuery {
            site: site("UDI"),
            query: all_female,
            hop: 1
        }]
    );
}

#[test]
fn id_pinned_queries_go_to_the_owner_only() {
    let members = [site("CAM"), site("UDI"), site("OXF")];
    let pinned = q("select images where image.view = CC and patient.id = UDI:patient:0000000000000000000000000000abcd");
    let plan = decompose(&pinned, &members, &site("CAM")).unwrap();
    assert_eq!(plan.remotes.len(), 1);
    assert_eq!(plan.remotes[0].site, site("UDI"));
    assert!(!needs_local(&pinned, &site("CAM")));
    assert!(needs_local(&pinned, &site("UDI")));

    let own = q("select images where patient.id = CAM:patient:0000000000000000000000000000abcd");
    assert!(decompose(&own, &members, &site("CAM")).unwrap().remotes.is_empty());

    // Under `or` the id is not a top-level conjunct: broadcast.
    let loose = q("select images where patient.id = UDI:patient:0000000000000000000000000000abcd or true");
    assert_eq!(decompose(&loose, &members, &site("CAM")).unwrap().remotes.len(), 2);

    let contradictory = q("select images where patient.id = UDI:patient:0000000000000000000000000000abcd and image.id = OXF:image:0000000000000000000000000000abcd");
    assert!(decompose(&contradictory, &members, &site("CAM")).unwrap().remotes.is_empty());
}

#[test]
fn decompose_requires_membership() {
    assert_eq!(
        decompose(&q("select images where true"), &[site("UDI")], &site("CAM")),
        Err(QueryError::NotAMember(site("CAM")))
    );
}

#[test]
fn local_only_plans_never_forward() {
    let plan = QueryPlan::local_only(q("select images where true"), site("UDI"));
    assert_eq!(plan.hop, 1);
    assert!(plan.remotes.is_empty());
}

// ---- lowering ----

fn three_patients() -> fixtures::Built {
    fixtures::build(
        "CAM",
        &[
            spec(F, 1950, 2005, &[(L, CC), (L, MLO), (R, CC)]),
            spec(M, 1940, 2005, &[(L, CC)]),
            spec(F, 1970, 2004, &[(R, MLO), (L, CC)]),
        ],
    )
}

fn ids_of(rows: &[crate::model::JoinedRow]) -> BTreeSet<GlobalId> {
    rows.iter().map(|r| r.image.id.clone()).collect()
}

#[test]
fn laterality_scan() {
    let b = three_patients();
    let plan = lower_to_local_plan(&q("select images where image.laterality = L"), &b.catalog.vocabulary()).unwrap();
    assert_eq!(
        plan.predicate,
        Pred::Cmp {
            col: Column::Laterality,
            op: CmpOp::Eq,
            value: ColumnValue::Text("L".into())
        }
    );
    let rows = b.catalog.select(&plan).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.image.laterality == L));
}

#[test]
fn derived_predicate_joins_and_absent_is_false() {
    let b = three_patients();
    let alg = fixtures::density_algorithm();
    b.catalog.upsert_algorithm(alg.clone()).unwrap();
    let site = b.catalog.site().clone();
    let densities = [(0usize, 0.5), (1, 0.1), (3, 0.9)];
    for (n, (i, d)) in densities.iter().enumerate() {
        b.catalog
            .upsert_derived(DerivedRecord {
                id: GlobalId::new(site.clone(), IdKind::Derived, 1000 + n as u128),
                image: b.images[*i].clone(),
                algorithm: alg.id.clone(),
                scalars: BTreeMap::from([("density".to_string(), *d)]),
                file: None,
            })
            .unwrap();
    }
    let vocab = b.catalog.vocabulary();
    let plan = lower_to_local_plan(&q("select images where derived.density > 0.3"), &vocab).unwrap();
    // Brute-force join oracle over the known assignments.
    let expected: BTreeSet<GlobalId> = densities
        .iter()
        .filter(|(_, d)| *d > 0.3)
        .map(|(i, _)| b.images[*i].clone())
        .collect();
    assert_eq!(ids_of(&b.catalog.select(&plan).unwrap()), expected);

    // `not` of a derived predicate includes images with no derived record.
    let neg = lower_to_local_plan(&q("select images where not derived.density > 0.3"), &vocab).unwrap();
    assert_eq!(b.catalog.select(&neg).unwrap().len(), b.images.len() - expected.len());

    assert!(matches!(
        lower_to_local_plan(&q("select images where derived.spiculation > 1"), &vocab),
        Err(QueryError::UnknownAttribute(_))
    ));
}

#[test]
fn negation_is_set_complement() {
    let b = three_patients();
    let vocab = b.catalog.vocabulary();
    let f = b.catalog.select(&lower_to_local_plan(&q("select images where patient.sex = F"), &vocab).unwrap()).unwrap();
    let not_f = b
        .catalog
        .select(&lower_to_local_plan(&q("select images where not patient.sex = F"), &vocab).unwrap())
        .unwrap();
    let all: BTreeSet<GlobalId> = b.images.iter().cloned().collect();
    assert_eq!(ids_of(&not_f), all.difference(&ids_of(&f)).cloned().collect());
    assert_eq!(ids_of(&f).len(), 5);
}

#[test]
fn age_is_taken_at_acquisition() {
    let b = three_patients();
    let vocab = b.catalog.vocabulary();
    // 2005 - 1950 = 55; 2005 - 1940 = 65; 2004 - 1970 = 34.
    let rows = b
        .catalog
        .select(&lower_to_local_plan(&q("select images where patient.age in [55, 55]"), &vocab).unwrap())
        .unwrap();
    assert_eq!(rows.len(), 3);
    let both = b
        .catalog
        .select(&lower_to_local_plan(&q("select images where patient.age in [50,60] and image.laterality = L"), &vocab).unwrap())
        .unwrap();
    let lat = b
        .catalog
        .select(&lower_to_local_plan(&q("select images where image.laterality = L"), &vocab).unwrap())
        .unwrap();
    assert!(ids_of(&both).is_subset(&ids_of(&lat)));
    assert_eq!(both.len(), 2);
}

#[test]
fn image_projection_includes_vocabulary_scalars() {
    let b = three_patients();
    b.catalog.upsert_algorithm(fixtures::density_algorithm()).unwrap();
    let plan = lower_to_local_plan(&q("select images where true"), &b.catalog.vocabulary()).unwrap();
    assert!(plan.projection.contains(&"derived.density".to_string()));
    let mut sorted = plan.projection.clone();
    sorted.sort();
    assert_eq!(sorted, plan.projection);
}

// ---- properties ----

fn arb_attr_cmp() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (prop::bool::ANY, prop::bool::ANY).prop_map(|(f, ne)| cmp(
            Attribute::PatientSex,
            if ne { CmpOp::Ne } else { CmpOp::Eq },
            Literal::Text(if f { "F" } else { "M" }.into())
        )),
        (0usize..6, -5i32..120).prop_map(|(op, n)| cmp(
            Attribute::PatientAge,
            [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge][op],
            Literal::Number(n as f64)
        )),
        (0i32..100, 0i32..100).prop_map(|(a, b)| Expr::Range {
            attr: Attribute::PatientAge,
            lo: Literal::Number(a.min(b) as f64),
            hi: Literal::Number(a.max(b) as f64)
        }),
        (0u32..3000, 0usize..6).prop_map(|(d, op)| cmp(
            Attribute::StudyDate,
            [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge][op],
            Literal::Date(chrono::NaiveDate::from_ymd_opt(2000, 1, 1).unwrap() + chrono::Days::new(d as u64))
        )),
        (0.0f64..10.0).prop_map(|d| cmp(Attribute::ImageDose, CmpOp::Gt, Literal::Number(d))),
        (0.0f64..1.0, "[a-z_][a-z0-9_]{0,6}").prop_map(|(d, n)| cmp(Attribute::Derived(n), CmpOp::Le, Literal::Number(d))),
        any::<u128>().prop_map(|l| cmp(Attribute::ImageId, CmpOp::Eq, Literal::Id(GlobalId::new(site("UDI"), IdKind::Image, l)))),
        prop::bool::ANY.prop_map(|b| cmp(Attribute::ImageView, CmpOp::Eq, Literal::Text(if b { "CC" } else { "MLO" }.into()))),
        prop::bool::ANY.prop_map(Expr::Const),
    ]
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    arb_attr_cmp().prop_recursive(4, 32, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::and(l, r)),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::or(l, r)),
            inner.prop_map(Expr::not),
        ]
    })
}

proptest! {
    #[test]
    fn printer_round_trips(expr in arb_expr(), t in 0usize..3) {
        let target = [Target::Patients, Target::Studies, Target::Images][t];
        let fq = FormalQuery { target, expr, source_text: String::new() };
        let text = fq.canonical();
        let back = parse_query(&text).unwrap();
        prop_assert_eq!(&back, &fq);
        prop_assert_eq!(back.canonical(), text);
    }
}
