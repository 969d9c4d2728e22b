use maskap_core::netsim::{ErrorKind, SimError, World};
use maskap_core::protocol::ProtocolError;

fn base() -> World {
    let mut w = World::new(404);
    w.add_server("s0", "spw0", "east").unwrap();
    w.add_user("alice", "apw").unwrap();
    w.advance_and_sync(1).unwrap();
    w
}

#[test]
fn new_server_needs_card_update() {
    let mut w = base();
    w.add_server("s1", "spw1", "west").unwrap();
    let before = w.run_honest_session("alice", "s1", 5).unwrap();
    assert_eq!(before.error, Some(ErrorKind::Protocol(ProtocolError::UnknownServer)));
    assert_eq!(w.user("alice").unwrap().card.server_count(), 1);

    w.update_card("alice").unwrap();
    assert_eq!(w.user("alice").unwrap().card.server_count(), 2);
    // s1 was provisioned with alice already in its memory
    assert!(w.run_honest_session("alice", "s1", 5).unwrap().accepted);
    assert!(w.run_honest_session("alice", "s0", 5).unwrap().accepted);
}

#[test]
fn new_user_needs_server_sync() {
    let mut w = base();
    w.add_user("bob", "bpw").unwrap();
    let before = w.run_honest_session("bob", "s0", 5).unwrap();
    assert_eq!(before.error, Some(ErrorKind::Protocol(ProtocolError::UnknownUser)));
    assert_eq!(w.advance_and_sync(2).unwrap(), 1);
    assert!(w.run_honest_session("bob", "s0", 5).unwrap().accepted);
    assert_eq!(w.advance_and_sync(2).unwrap(), 0);
}

#[test]
fn card_update_is_idempotent() {
    let mut w = base();
    let card = w.user("alice").unwrap().card.clone();
    w.update_card("alice").unwrap();
    assert_eq!(w.user("alice").unwrap().card, card);
}

#[test]
fn unknown_participants_are_errors() {
    let mut w = base();
    assert!(matches!(w.update_card("carol"), Err(SimError::NoSuchUser(_))));
    assert!(matches!(w.run_honest_session("alice", "nope", 5), Err(SimError::NoSuchServer(_))));
    assert!(matches!(
        w.add_server("s0", "x", "y"),
        Err(SimError::Protocol(ProtocolError::DuplicateServerId))
    ));
}
