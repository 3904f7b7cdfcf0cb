import copy

import pytest

from bubblecodes.controller import (
    ClaimUpdate,
    Preempt,
    RemoteControllerState,
    Timer,
    TimerConfig,
    c0_handle,
    c0_partition,
    c0_retract,
    ci_handle,
)
from bubblecodes.model import AppManifest, BubbleSpec, BubblesMap, MapEntry, NodeProfile, UnusedNode, UserClaim
from bubblecodes.wire import (
    BubbleTransfer,
    MapUpdate,
    Message,
    PermissionReply,
    PermissionRequest,
    QualificationReply,
    QualificationRequest,
    RetractCommand,
    StatusHeartbeat,
    SwitchNotice,
    TaskCompletion,
)

CFG = TimerConfig()
LEASE = CFG.lease_ms

VP = AppManifest(
    "vp",
    "phone",
    (
        BubbleSpec("video", frozenset({"display"})),
        BubbleSpec("audio", frozenset({"audio"})),
        BubbleSpec("control", frozenset({"input"})),
    ),
)
DESKTOP = NodeProfile("desktop", "bedroom", frozenset({"display", "audio", "input"}), 2)
HIFI1 = NodeProfile("hifi1", "living", frozenset({"audio"}), 3)
HIFI2 = NodeProfile("hifi2", "living", frozenset({"audio"}), 5)
TV = NodeProfile("tv", "living", frozenset({"display"}), 4)


def msg(src, dst, body, app="vp"):
    return Message(0, src, dst, app, body)


def partition(nodes, grant=lambda node, bubble: True, now=0):
    """Drive a first partitioning round; nodes answer after their latency."""
    step = c0_partition(VP, nodes, now, user="alice", priority=5, config=CFG)
    st, sent, trace = step.state, list(step.messages), list(step.trace)
    profiles = {n.node_id: n for n in nodes}
    while True:
        pending = [m for m in sent if isinstance(m.body, (QualificationRequest, PermissionRequest))]
        if not pending:
            return st, sent, trace
        sent = [m for m in sent if m not in pending]
        for m in pending:
            node = profiles[m.dst]
            if isinstance(m.body, QualificationRequest):
                reply = QualificationReply(node.capabilities)
            else:
                reply = PermissionReply(m.body.bubble_id, grant(node.node_id, m.body.bubble_id), "")
            s = c0_handle(st, msg(node.node_id, "phone", reply), now + node.link_latency_ms)
            st = s.state
            sent += s.messages
            trace += s.trace


def transfers(sent):
    return {m.body.spec.bubble_id: m.dst for m in sent if isinstance(m.body, BubbleTransfer)}


# -- partitioning --------------------------------------------------------------------


def test_bedroom_everything_to_desktop():
    st, sent, _ = partition([DESKTOP])
    assert transfers(sent) == {"video": "desktop", "audio": "desktop", "control": "desktop"}
    assert st.map.version == 1
    assert all(m.body.map == st.map for m in sent if isinstance(m.body, BubbleTransfer))
    assert {b: r.phase for b, r in st.source_bubbles.items()} == dict.fromkeys(VP.bubble_ids, "dormant")


def test_kitchen_only_audio_leaves():
    hifi = NodeProfile("hifi2", "kitchen", frozenset({"audio"}), 3)
    st, sent, _ = partition([hifi])
    assert transfers(sent) == {"audio": "hifi2"}
    assert st.map.host_of("video") == st.map.host_of("control") == "phone"
    assert st.source_bubbles["video"].phase == "active"
    assert st.source_bubbles["audio"].phase == "dormant"


def test_empty_environment_keeps_everything_home():
    st, sent, trace = partition([])
    assert sent == []
    assert st.map.version == 1
    assert [e.active_host for e in st.map.entries] == ["phone"] * 3
    assert any(e.kind == "map" and e["v"] == "1" for e in trace)


def test_living_room_split():
    st, sent, _ = partition([HIFI1, HIFI2, TV])
    assert transfers(sent) == {"video": "tv", "audio": "hifi1"}
    assert [u.node_id for u in st.map.unused_nodes] == ["hifi2"]


def test_refused_permission_excludes_node():
    st, sent, _ = partition([HIFI1, HIFI2, TV], grant=lambda n, b: n != "hifi1")
    assert transfers(sent) == {"video": "tv", "audio": "hifi2"}


def test_round_timeout_places_with_answers_so_far():
    step = c0_partition(VP, [TV], 0, user="alice", priority=5, config=CFG)
    (tick,) = [t for t in step.timers if t[1] == "round"]
    out = c0_handle(step.state, Timer("round", tick[2]), tick[0])
    assert out.state.map.version == 1
    assert transfers(out.messages) == {}
    assert any(e.kind == "round_timeout" for e in out.trace)


# -- monitoring and retraction ---------------------------------------------------------


def placed_on_tv():
    st, sent, _ = partition([TV])
    return st, sent


def test_lost_node_retracts_after_lease():
    st, _ = placed_on_tv()
    granted = st.granted_at["video"]
    early = c0_handle(st, Timer("lease", "tv"), granted + LEASE - 1)
    assert early.state.map.host_of("video") == "tv"
    late = c0_handle(st, Timer("lease", "tv"), granted + LEASE)
    assert late.state.map.host_of("video") == "phone"
    assert late.state.map.version == st.map.version + 1
    assert late.state.source_bubbles["video"].phase == "active"
    assert [e.kind for e in late.trace][:2] == ["node_lost", "retract"]


def test_heartbeats_keep_lease_alive():
    st, _ = placed_on_tv()
    t = st.granted_at["video"]
    for beat in range(1, 6):
        t += CFG.heartbeat_interval_ms
        st = c0_handle(st, msg("tv", "phone", StatusHeartbeat(("video",), t - 4, 1)), t).state
    assert c0_handle(st, Timer("lease", "tv"), t + LEASE - 1).state.map.host_of("video") == "tv"


def test_heartbeat_is_echoed():
    st, _ = placed_on_tv()
    out = c0_handle(st, msg("tv", "phone", StatusHeartbeat(("video",), 1000, 1)), 1004)
    assert [m.body for m in out.messages] == [StatusHeartbeat(("video",), 1000, 1)]


def test_duplicate_heartbeat_changes_only_timestamp():
    st, _ = placed_on_tv()
    beat = msg("tv", "phone", StatusHeartbeat(("video",), 1000, 1))
    first = c0_handle(st, beat, 1004)
    again = c0_handle(first.state, beat, 1010)
    assert again.messages == []
    assert again.state.last_heartbeat_at["tv"] == 1010
    a, b = copy.copy(first.state), copy.copy(again.state)
    a.last_heartbeat_at = b.last_heartbeat_at = {}
    assert a.map == b.map and a.source_bubbles == b.source_bubbles and a.echoed == b.echoed


def test_stale_map_on_heartbeat_triggers_resend():
    st, _ = placed_on_tv()
    out = c0_handle(st, msg("tv", "phone", StatusHeartbeat(("video",), 1000, 0)), 1004)
    assert MapUpdate(st.map) in [m.body for m in out.messages]


def test_missing_bubble_in_heartbeat_comes_home():
    st, _ = placed_on_tv()
    out = c0_handle(st, msg("tv", "phone", StatusHeartbeat((), 1000, 1)), 1004)
    assert out.state.map.host_of("video") == "phone"
    assert out.state.source_bubbles["video"].phase == "active"


def test_task_completion_marks_completed():
    st, _ = placed_on_tv()
    out = c0_handle(st, msg("tv", "phone", TaskCompletion("video")), 900)
    e = out.state.map.entry("video")
    assert e.status == "completed"
    assert out.state.map.version == st.map.version + 1
    assert out.state.source_bubbles["video"].phase == "dormant"


def test_c0_order_waits_for_ack():
    st, _ = placed_on_tv()
    out = c0_retract(st, "video", "c0_order", 500)
    assert RetractCommand("video", "c0_order") in [m.body for m in out.messages]
    assert out.state.map.entry("video").status == "retracting"
    assert out.state.source_bubbles["video"].phase == "dormant"
    ack = c0_handle(out.state, msg("tv", "phone", StatusHeartbeat((), 504, 2)), 508)
    assert ack.state.map.entry("video").status == "active"
    assert ack.state.map.host_of("video") == "phone"
    assert ack.state.source_bubbles["video"].phase == "active"


def test_c0_order_for_bubble_at_home_is_noop():
    st, _ = placed_on_tv()
    out = c0_retract(st, "control", "c0_order", 500)
    assert out.messages == [] and out.state.map == st.map
    assert [e.kind for e in out.trace] == ["redundant_retract"]


def test_retracting_completed_bubble_is_noop():
    st, _ = placed_on_tv()
    st = c0_handle(st, msg("tv", "phone", TaskCompletion("video")), 900).state
    out = c0_retract(st, "video", "node_lost", 1000)
    assert out.state.map == st.map
    assert out.trace[0].kind == "redundant_retract"


def test_unknown_bubble_is_protocol_error():
    st, _ = placed_on_tv()
    out = c0_handle(st, msg("tv", "phone", TaskCompletion("subtitles")), 900)
    assert out.trace[0].kind == "protocol_error"
    assert out.messages == [] and out.state.map == st.map


def test_message_for_other_app_is_protocol_error():
    st, _ = placed_on_tv()
    out = c0_handle(st, msg("tv", "phone", TaskCompletion("video"), app="mail"), 900)
    assert out.trace[0].kind == "protocol_error"


# -- switching -----------------------------------------------------------------------


def test_switch_notice_resequenced_after_target_grants():
    st, _, _ = partition([HIFI1, HIFI2, TV])
    v = st.map.version
    proposed = st.map.with_entry("audio", active_host="hifi2")
    notice = c0_handle(st, msg("hifi1", "phone", SwitchNotice("audio", "hifi1", "hifi2", proposed)), 1000)
    assert [(m.dst, type(m.body)) for m in notice.messages] == [("hifi2", PermissionRequest)]
    assert notice.state.map.version == v
    done = c0_handle(notice.state, msg("hifi2", "phone", PermissionReply("audio", True, "granted")), 1010)
    assert done.state.map.version == v + 1
    assert done.state.map.host_of("audio") == "hifi2"
    sent = {(m.dst, type(m.body)) for m in done.messages}
    assert sent == {("hifi2", BubbleTransfer), ("hifi1", MapUpdate), ("tv", MapUpdate)}


def test_switch_refused_by_target_goes_home():
    st, _, _ = partition([HIFI1, HIFI2, TV])
    proposed = st.map.with_entry("audio", active_host="hifi2")
    notice = c0_handle(st, msg("hifi1", "phone", SwitchNotice("audio", "hifi1", "hifi2", proposed)), 1000)
    out = c0_handle(notice.state, msg("hifi2", "phone", PermissionReply("audio", False, "claimed")), 1010)
    assert out.state.map.host_of("audio") == "phone"


def test_switch_to_source_is_retraction():
    st, _ = placed_on_tv()
    proposed = st.map.with_entry("video", active_host="phone")
    out = c0_handle(st, msg("tv", "phone", SwitchNotice("video", "tv", "phone", proposed)), 1000)
    assert out.state.map.host_of("video") == "phone"
    assert out.state.map.version == st.map.version + 1


# -- purity --------------------------------------------------------------------------


def test_handlers_are_pure():
    st, _ = placed_on_tv()
    snapshot = copy.deepcopy(st)
    inp = msg("tv", "phone", StatusHeartbeat((), 1000, 1))
    a = c0_handle(st, inp, 1004)
    b = c0_handle(st, inp, 1004)
    assert a.messages == b.messages and a.trace == b.trace and a.timers == b.timers
    assert st.map == snapshot.map and st.source_bubbles == snapshot.source_bubbles
    assert st.last_heartbeat_at == snapshot.last_heartbeat_at


# -- remote controller ---------------------------------------------------------------------


MAP_V1 = BubblesMap("vp", 1, (MapEntry("video", "tv"), MapEntry("audio", "phone"), MapEntry("control", "phone")))


def remote():
    return RemoteControllerState("tv", TV.capabilities, CFG)


def hosting(now=100):
    transfer = BubbleTransfer(VP.spec("video"), MAP_V1, lease_start=now - 4)
    return ci_handle(remote(), msg("phone", "tv", transfer), now)


def test_transfer_activates_replica():
    out = hosting()
    assert out.state.hosted == {("vp", "video")}
    assert out.state.bubbles[("vp", "video")].phase == "active"
    assert out.state.known_map["vp"] == MAP_V1


def test_next_heartbeat_lists_new_replica():
    out = hosting()
    (tick,) = [t for t in out.timers if t[1] == "heartbeat"]
    beat = ci_handle(out.state, Timer("heartbeat", "vp"), tick[0])
    assert [m.body.hosted_bubbles for m in beat.messages] == [("video",)]


def test_duplicate_transfer_is_idempotent():
    out = hosting()
    again = ci_handle(out.state, msg("phone", "tv", BubbleTransfer(VP.spec("video"), MAP_V1, 100)), 120)
    assert again.state.hosted == out.state.hosted
    assert [e.kind for e in again.trace] == ["duplicate_transfer"]


def test_silence_from_source_destroys_replica():
    out = hosting(100)
    st = out.state
    alive = ci_handle(st, Timer("lease", "vp"), 96 + LEASE - 2)
    assert alive.state.hosted
    dead = ci_handle(st, Timer("lease", "vp"), 96 + LEASE - 1)
    assert not dead.state.hosted
    assert any(e.kind == "lease_expired" for e in dead.trace)


def test_echo_renews_remote_lease():
    st = hosting(100).state
    st = ci_handle(st, msg("phone", "tv", StatusHeartbeat(("video",), 2000, 1)), 2008).state
    assert ci_handle(st, Timer("lease", "vp"), 96 + LEASE).state.hosted


def test_older_map_ignored():
    st = hosting().state
    v4 = MAP_V1.with_version(4)
    st = ci_handle(st, msg("phone", "tv", MapUpdate(v4)), 200).state
    out = ci_handle(st, msg("phone", "tv", MapUpdate(MAP_V1.with_version(3).with_entry("video", active_host="phone"))), 300)
    assert out.state.known_map["vp"].version == 4
    assert out.state.hosted == {("vp", "video")}


def test_map_moving_bubble_away_destroys_replica():
    st = hosting().state
    moved = MAP_V1.with_entry("video", active_host="tv2").with_version(2)
    out = ci_handle(st, msg("phone", "tv", MapUpdate(moved)), 300)
    assert not out.state.hosted


def test_retract_command_destroys_and_acks():
    st = hosting().state
    out = ci_handle(st, msg("phone", "tv", RetractCommand("video", "c0_order")), 300)
    assert not out.state.hosted
    assert [m.body.hosted_bubbles for m in out.messages if isinstance(m.body, StatusHeartbeat)] == [()]


def test_preemption_starts_switch():
    st = hosting().state
    v2 = BubblesMap("vp", 2, MAP_V1.entries, (UnusedNode("tv2", frozenset({"display"}), 6),))
    st = ci_handle(st, msg("phone", "tv", MapUpdate(v2)), 200).state
    out = ci_handle(st, Preempt("vp", "video", "bob", 9), 300)
    (notice,) = [m.body for m in out.messages]
    assert isinstance(notice, SwitchNotice) and notice.to_node == "tv2"
    assert out.state.bubbles[("vp", "video")].phase == "switching"


def test_claimed_node_refuses_permission():
    st = ci_handle(remote(), msg("phone", "tv", PermissionRequest("video", frozenset({"display"}), "alice", 5)), 0).state
    st = ci_handle(st, ClaimUpdate(UserClaim("bob", "tv", 9)), 10).state
    out = ci_handle(st, msg("phone", "tv", PermissionRequest("video", frozenset({"display"}), "alice", 5)), 20)
    assert [m.body for m in out.messages] == [PermissionReply("video", False, "claimed")]


def test_unqualified_node_refuses_permission():
    out = ci_handle(remote(), msg("phone", "tv", PermissionRequest("audio", frozenset({"audio"}), "alice", 5)), 0)
    assert out.messages[0].body.granted is False


def test_qualification_reply_lists_capabilities():
    out = ci_handle(remote(), msg("phone", "tv", QualificationRequest(frozenset({"audio"}))), 0)
    assert [m.body for m in out.messages] == [QualificationReply(frozenset({"display"}))]


@pytest.mark.parametrize("bad", [0, -1])
def test_timer_config_must_be_positive(bad):
    with pytest.raises(ValueError):
        TimerConfig(heartbeat_interval_ms=bad)


def test_lease_is_derived():
    assert TimerConfig(200, 4).lease_ms == 800
