# Anchors pytest's rootdir-based sys.path insertion so `import oracles`
# works from any invocation directory.
